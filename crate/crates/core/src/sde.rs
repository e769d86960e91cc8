//! Diffusion models `dX = f(X) dt + sigma(X) dW` and one-step integrators.
//!
//! Models are given programmatically: a drift writing `f(x)` into a slice of
//! length `dim`, a diffusion writing the row-major `dim x dim` matrix
//! `sigma(x)`, and optionally the gradient tensor `d sigma_ij / d x_k` needed
//! by the Milstein correction. Integrators never clamp or reflect; models
//! whose state must be folded back into a domain (e.g. a reflecting upper
//! edge) attach a `domain_guard` that trajectory runners apply after each
//! unabsorbed step.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type StateFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type GuardFn = Box<dyn Fn(&mut [f64]) + Send + Sync>;

/// A time-homogeneous SDE on `R^dim`.
pub struct SdeModel {
    dim: usize,
    label: String,
    drift: StateFn,
    diffusion: StateFn,
    diffusion_gradient: Option<StateFn>,
    domain_guard: Option<GuardFn>,
}

impl SdeModel {
    pub fn new(
        dim: usize,
        label: impl Into<String>,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        SdeModel {
            dim,
            label: label.into(),
            drift: Box::new(drift),
            diffusion: Box::new(diffusion),
            diffusion_gradient: None,
            domain_guard: None,
        }
    }

    /// Attaches `d sigma_ij / d x_k` as a row-major `dim^3` tensor
    /// (index `(i * dim + j) * dim + k`).
    pub fn with_diffusion_gradient(
        mut self,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.diffusion_gradient = Some(Box::new(gradient));
        self
    }

    /// Attaches a fold applied by trajectory runners after each unabsorbed
    /// step (not by the integrators themselves).
    pub fn with_domain_guard(
        mut self,
        guard: impl Fn(&mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.domain_guard = Some(Box::new(guard));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval_drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out);
    }

    /// Writes the row-major `dim x dim` matrix `sigma(x)`.
    pub fn eval_diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out);
    }

    pub fn has_diffusion_gradient(&self) -> bool {
        self.diffusion_gradient.is_some()
    }

    pub fn eval_diffusion_gradient(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.diffusion_gradient {
            Some(g) => {
                g(x, out);
                Ok(())
            }
            None => Err(Error::UnsupportedScheme(format!(
                "model `{}` has no diffusion gradient",
                self.label
            ))),
        }
    }

    pub fn has_domain_guard(&self) -> bool {
        self.domain_guard.is_some()
    }

    pub fn apply_domain_guard(&self, x: &mut [f64]) {
        if let Some(g) = &self.domain_guard {
            g(x);
        }
    }

    /// Diagonal entry `sigma_kk(x)`; scratch-free helper for per-axis
    /// bridge strengths.
    pub fn diffusion_diag(&self, x: &[f64], axis: usize) -> f64 {
        let mut buf = [0.0; 9];
        self.eval_diffusion(x, &mut buf[..self.dim * self.dim]);
        buf[axis * self.dim + axis]
    }
}

impl std::fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdeModel")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field("has_gradient", &self.diffusion_gradient.is_some())
            .field("has_domain_guard", &self.domain_guard.is_some())
            .finish()
    }
}

/// One-step integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    EulerMaruyama,
    Milstein,
}

/// Gaussian increments for one step: independent `N(0, dt)` draws per axis.
#[derive(Debug, Clone)]
pub struct NoiseIncrement {
    dt: f64,
    values: Vec<f64>,
}

impl NoiseIncrement {
    pub fn new(dt: f64, values: Vec<f64>) -> Self {
        NoiseIncrement { dt, values }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// A reproducible random source identified by `(seed, stream_id)`.
///
/// Streams with the same seed but different ids are statistically
/// independent, and the draw sequence for a given pair is identical across
/// runs and platforms.
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh increments for one step of size `dt` in `dim` dimensions.
    pub fn sample_increment(&mut self, dt: f64, dim: usize) -> NoiseIncrement {
        let mut values = vec![0.0; dim];
        self.fill_increment(dt, &mut values);
        NoiseIncrement { dt, values }
    }

    /// Allocation-free variant of [`sample_increment`](Self::sample_increment).
    pub fn fill_increment(&mut self, dt: f64, out: &mut [f64]) {
        let scale = dt.sqrt();
        for w in out {
            let z: f64 = self.rng.sample(StandardNormal);
            *w = scale * z;
        }
    }

    /// One standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// One uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RngStream(seed={}, stream={})", self.seed, self.stream_id)
    }
}

/// One Euler-Maruyama step: `x + f(x) dt + sigma(x) w`.
pub fn em_step(model: &SdeModel, x: &[f64], w: &NoiseIncrement) -> Result<Vec<f64>> {
    let mut stepper = Stepper::new(model, Scheme::EulerMaruyama);
    let mut out = vec![0.0; model.dim()];
    stepper.step(x, w.dt(), w.values(), &mut out)?;
    Ok(out)
}

/// One Milstein step for diagonal noise: the Euler-Maruyama step plus
/// `(1/2) sigma_kk (d sigma_kk / d x_k) (w_k^2 - dt)` per axis.
pub fn milstein_step(model: &SdeModel, x: &[f64], w: &NoiseIncrement) -> Result<Vec<f64>> {
    let mut stepper = Stepper::new(model, Scheme::Milstein);
    let mut out = vec![0.0; model.dim()];
    stepper.step(x, w.dt(), w.values(), &mut out)?;
    Ok(out)
}

/// Reusable stepping state for long trajectories; owns the scratch buffers
/// so the per-step path is allocation-free.
pub struct Stepper<'m> {
    model: &'m SdeModel,
    scheme: Scheme,
    drift: Vec<f64>,
    sigma: Vec<f64>,
    gradient: Vec<f64>,
}

impl<'m> Stepper<'m> {
    pub fn new(model: &'m SdeModel, scheme: Scheme) -> Self {
        let d = model.dim();
        Stepper {
            model,
            scheme,
            drift: vec![0.0; d],
            sigma: vec![0.0; d * d],
            gradient: vec![0.0; d * d * d],
        }
    }

    pub fn model(&self) -> &'m SdeModel {
        self.model
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Advances `x` by one step of size `dt` with increments `w` (length
    /// `dim`, each `N(0, dt)`), writing the next state into `out`.
    pub fn step(&mut self, x: &[f64], dt: f64, w: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.model.dim();
        debug_assert_eq!(x.len(), d);
        debug_assert_eq!(w.len(), d);
        self.model.eval_drift(x, &mut self.drift);
        self.model.eval_diffusion(x, &mut self.sigma);
        for i in 0..d {
            let mut xi = x[i] + self.drift[i] * dt;
            for j in 0..d {
                xi += self.sigma[i * d + j] * w[j];
            }
            out[i] = xi;
        }
        if self.scheme == Scheme::Milstein {
            self.add_milstein_correction(x, dt, w, out)?;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { state: x.to_vec() });
        }
        Ok(())
    }

    fn add_milstein_correction(
        &mut self,
        x: &[f64],
        dt: f64,
        w: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let d = self.model.dim();
        for i in 0..d {
            for j in 0..d {
                if i != j && self.sigma[i * d + j] != 0.0 {
                    return Err(Error::UnsupportedScheme(format!(
                        "Milstein requires diagonal noise, sigma[{i}][{j}] != 0 on `{}`",
                        self.model.label()
                    )));
                }
            }
        }
        self.model
            .eval_diffusion_gradient(x, &mut self.gradient)?;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    if !(i == j && j == k) && self.gradient[(i * d + j) * d + k] != 0.0 {
                        return Err(Error::UnsupportedScheme(format!(
                            "Milstein requires diagonal noise, \
                             d sigma[{i}][{j}] / d x[{k}] != 0 on `{}`",
                            self.model.label()
                        )));
                    }
                }
            }
        }
        for i in 0..d {
            let s = self.sigma[i * d + i];
            let g = self.gradient[(i * d + i) * d + i];
            let corr = 0.5 * s * g * (w[i] * w[i] - dt);
            if corr.is_finite() {
                out[i] += corr;
            }
        }
        Ok(())
    }
}
