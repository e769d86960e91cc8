//! The four pipelines behind the subcommands. Each returns a process exit
//! code: 0 on success, 2 for configuration problems, 3 when the survival
//! tail rejects the killing-rate estimate (the fix is a longer run), and 4
//! when the coupling tail cannot support a contraction rate.

use std::path::{Path, PathBuf};

use qsd_core::absorption::{AbsorbingSpec, BridgePolicy, HalfSpace};
use qsd_core::coupling::{
    estimate_coupling_times, fit_exponential_tail, CouplingConfig, FarScheme, ThresholdRule,
    DEFAULT_TAIL_WIDTH_CAP,
};
use qsd_core::grid::{DensityGrid, GridSpec};
use qsd_core::io;
use qsd_core::models::{self, NamedExperiment};
use qsd_core::operator::{assemble_operator, constraint_matrix};
use qsd_core::sampler::{
    estimate_killing_rate, run_qsd_ensemble, tail_acceptance, SamplerConfig,
};
use qsd_core::sde::{RngStream, Scheme, SdeModel};
use qsd_core::sensitivity::{
    finite_time_error_demographic, finite_time_error_reflection, DemographicPair, NoiseMatching,
    SensitivityCase, SensitivityReport, WindowProtocol,
};
use qsd_core::solver::{least_norm_solve, solve_blocked, BlockSpec, SolveReport};
use qsd_core::Error as CoreError;

use crate::config::RunConfig;

/// Stream id for the window-protocol generator, far from the per-pair
/// coupling streams so the two stages never share noise.
const WINDOW_STREAM: u64 = 1 << 32;

pub enum Failure {
    Config(String),
    TailRejected(String),
    FitRejected(String),
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::TailRejected(_) => 3,
            Failure::FitRejected(_) => 4,
            Failure::Other(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m)
            | Failure::TailRejected(m)
            | Failure::FitRejected(m)
            | Failure::Other(m) => m,
        }
    }
}

impl From<CoreError> for Failure {
    fn from(err: CoreError) -> Failure {
        match err {
            CoreError::Config(_)
            | CoreError::GridMismatch(_)
            | CoreError::UnknownExperiment(_)
            | CoreError::Parse(_)
            | CoreError::UnsupportedScheme(_)
            | CoreError::InvalidBridgeStrength(_) => Failure::Config(err.to_string()),
            CoreError::FitRejected(_) | CoreError::InvalidContraction { .. } => {
                Failure::FitRejected(err.to_string())
            }
            CoreError::NoKillingObserved => Failure::TailRejected(format!(
                "{err}; run longer (increase --steps) or check the absorbing set"
            )),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Failure {
        Failure::Other(err.to_string())
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

struct Setup {
    experiment: NamedExperiment,
    grid: GridSpec,
    scheme: Scheme,
    dt: f64,
    x0: Vec<f64>,
}

fn resolve(cfg: &RunConfig) -> Result<Setup, Failure> {
    let name = cfg
        .experiment
        .as_deref()
        .ok_or_else(|| config_err("--experiment is required (or set it in the config file)"))?;
    let mut experiment = models::get_experiment(name)?;

    if cfg.sigma.is_some() || cfg.epsilon.is_some() {
        if name != "lotka_volterra" {
            return Err(config_err("--sigma/--epsilon only apply to lotka_volterra"));
        }
        experiment.model = models::lv_effective_model(
            cfg.sigma.unwrap_or(models::LV_SIGMA),
            cfg.epsilon.unwrap_or(models::LV_EPSILON),
        );
    }

    if let Some(bridge) = cfg.bridge.as_deref() {
        experiment.absorbing = experiment.absorbing.clone().with_bridge(parse_bridge(bridge)?);
    }

    let grid = match &cfg.cells {
        None => experiment.grid.clone(),
        Some(cells) => {
            let dim = experiment.grid.dim();
            if cells.len() != dim {
                return Err(config_err(format!(
                    "--cells lists {} axes, experiment `{name}` has {dim}",
                    cells.len()
                )));
            }
            let lower: Vec<f64> = (0..dim).map(|k| experiment.grid.lower(k)).collect();
            let upper: Vec<f64> = (0..dim).map(|k| experiment.grid.upper(k)).collect();
            GridSpec::new(&lower, &upper, cells)?
        }
    };

    let scheme = match cfg.scheme.as_deref() {
        None => experiment.scheme,
        Some(s) => parse_scheme(s)?,
    };
    let dt = cfg.dt.unwrap_or(experiment.dt);
    let x0 = cfg.x0.clone().unwrap_or_else(|| experiment.initial.clone());
    if x0.len() != experiment.model.dim() {
        return Err(config_err(format!(
            "--x0 has {} coordinates, experiment `{name}` needs {}",
            x0.len(),
            experiment.model.dim()
        )));
    }

    Ok(Setup {
        experiment,
        grid,
        scheme,
        dt,
        x0,
    })
}

fn parse_bridge(s: &str) -> Result<BridgePolicy, Failure> {
    match s {
        "off" => Ok(BridgePolicy::Off),
        "constant" => Ok(BridgePolicy::ConstantSigma),
        "modified" => Ok(BridgePolicy::ModifiedVanishing),
        other => Err(config_err(format!(
            "unknown bridge `{other}` (expected off, constant, or modified)"
        ))),
    }
}

fn parse_scheme(s: &str) -> Result<Scheme, Failure> {
    match s {
        "euler" => Ok(Scheme::EulerMaruyama),
        "milstein" => Ok(Scheme::Milstein),
        other => Err(config_err(format!(
            "unknown scheme `{other}` (expected euler or milstein)"
        ))),
    }
}

fn parse_case(s: &str) -> Result<SensitivityCase, Failure> {
    match s {
        "reflection" => Ok(SensitivityCase::Reflection),
        "demographic" => Ok(SensitivityCase::Demographic),
        other => Err(config_err(format!(
            "unknown case `{other}` (expected reflection or demographic)"
        ))),
    }
}

fn parse_matching(s: &str) -> Result<NoiseMatching, Failure> {
    match s {
        "add" => Ok(NoiseMatching::Add),
        "subtract" => Ok(NoiseMatching::Subtract),
        other => Err(config_err(format!(
            "unknown matching `{other}` (expected add or subtract)"
        ))),
    }
}

fn parse_steps(cfg: &RunConfig) -> Result<u64, Failure> {
    let raw = cfg.steps.unwrap_or(1e6);
    if !raw.is_finite() || raw < 1.0 || raw > 9.0e15 || raw.fract() != 0.0 {
        return Err(config_err(format!(
            "--steps must be a positive whole number, got {raw}"
        )));
    }
    Ok(raw as u64)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(cfg.out_dir.as_deref().unwrap_or("qsd_out"))
}

/// Reflecting surfaces for the coupled pair: the absorbing half-spaces plus
/// the faces of the exit box, if any.
fn mirror_set(absorbing: &AbsorbingSpec) -> Vec<HalfSpace> {
    let mut mirrors = absorbing.half_spaces().to_vec();
    if let Some((lower, upper)) = absorbing.exit_box() {
        for (axis, (&lo, &hi)) in lower.iter().zip(upper).enumerate() {
            mirrors.push(HalfSpace::below(axis, lo));
            mirrors.push(HalfSpace::above(axis, hi));
        }
    }
    mirrors
}

fn grid_center(grid: &GridSpec) -> Vec<f64> {
    (0..grid.dim())
        .map(|k| 0.5 * (grid.lower(k) + grid.upper(k)))
        .collect()
}

fn solve_entries(report: &SolveReport) -> Vec<(&'static str, String)> {
    let mut entries = vec![
        ("rhs_norm", format!("{:.16e}", report.rhs_norm)),
        ("residual_norm", format!("{:.16e}", report.residual_norm)),
        ("correction_norm", format!("{:.16e}", report.correction_norm)),
        ("clipped_mass", format!("{:.16e}", report.clipped_mass)),
    ];
    if let Some(before) = report.interface_residual_before {
        entries.push(("interface_residual_before", format!("{before:.16e}")));
    }
    if let Some(after) = report.interface_residual_after {
        entries.push(("interface_residual_after", format!("{after:.16e}")));
    }
    entries
}

fn block_spec(cfg: &RunConfig, grid: &GridSpec) -> Result<Option<BlockSpec>, Failure> {
    match &cfg.blocks {
        None => Ok(None),
        Some(blocks) => {
            if blocks.len() != grid.dim() {
                return Err(config_err(format!(
                    "--blocks lists {} axes, the grid has {}",
                    blocks.len(),
                    grid.dim()
                )));
            }
            let mut spec = BlockSpec::new(blocks);
            if let Some(overlap) = cfg.overlap {
                spec = spec.with_overlap(overlap);
            }
            if let Some(passes) = cfg.shift_passes {
                spec = spec.with_shift_passes(passes);
            }
            Ok(Some(spec))
        }
    }
}

fn solve_density(
    model: &SdeModel,
    grid: &GridSpec,
    lambda: f64,
    v: &DensityGrid,
    cfg: &RunConfig,
) -> Result<(DensityGrid, SolveReport), Failure> {
    match block_spec(cfg, grid)? {
        Some(spec) => Ok(solve_blocked(model, grid, lambda, v, &spec)?),
        None => {
            let op = assemble_operator(model, grid)?;
            let a = constraint_matrix(&op, lambda);
            Ok(least_norm_solve(&a, v)?)
        }
    }
}

fn dump_operator_if_asked(
    cfg: &RunConfig,
    model: &SdeModel,
    grid: &GridSpec,
    out: &Path,
    prov: &str,
) -> Result<(), Failure> {
    if cfg.dump_operator {
        let op = assemble_operator(model, grid)?;
        io::write_matrix_market(
            out.join("operator.mtx"),
            op.n_rows(),
            op.n_cols(),
            op.triplets(),
            Some(prov),
        )?;
    }
    Ok(())
}

/// Sample, estimate the killing rate, check the survival tail, and sharpen
/// the histogram with the constrained solve.
pub fn cmd_qsd(cfg: &RunConfig) -> Result<i32, Failure> {
    let setup = resolve(cfg)?;
    let steps = parse_steps(cfg)?;
    let seed = cfg.seed.unwrap_or(0);
    let trajectories = cfg.trajectories.unwrap_or(1);

    let mut sampler_cfg = SamplerConfig::new(steps, setup.dt, setup.scheme, setup.x0.clone());
    if let Some(f) = cfg.burn_in_fraction {
        sampler_cfg.burn_in_fraction = f;
    }
    if let Some(t) = cfg.history_thin {
        sampler_cfg.history_thin = t;
    }

    let (v, killing) = run_qsd_ensemble(
        &setup.experiment.model,
        &setup.experiment.absorbing,
        &setup.grid,
        &sampler_cfg,
        seed,
        0,
        trajectories,
    )?;
    let rate = estimate_killing_rate(&killing)?;
    let tail = tail_acceptance(&killing, rate, None)?;

    let out = out_dir(cfg);
    let prov = cfg.provenance();
    io::write_density_csv(out.join("v.csv"), &v, Some(&prov))?;
    io::write_taus(out.join("taus.txt"), killing.taus(), Some(&prov))?;
    io::write_scalar(out.join("lambda.txt"), rate, Some(&prov))?;
    io::write_survival_csv(out.join("tail_acceptance.csv"), &tail.points, Some(&prov))?;
    dump_operator_if_asked(cfg, &setup.experiment.model, &setup.grid, &out, &prov)?;

    let (u, report) = solve_density(&setup.experiment.model, &setup.grid, -rate, &v, cfg)?;
    io::write_density_csv(out.join("u.csv"), &u, Some(&prov))?;
    io::write_key_values(out.join("solve_report.txt"), &solve_entries(&report), Some(&prov))?;

    println!(
        "lambda {rate:.6} ({} kills), residual {:.3e}, wrote {}",
        killing.len(),
        report.residual_norm,
        out.display()
    );
    if !tail.accepted {
        eprintln!(
            "exponential tail rejected: exp(-lambda t) leaves the survival band; \
             run longer (increase --steps)"
        );
        return Ok(3);
    }
    Ok(0)
}

/// Re-solve a previously sampled density, reading the killing rate from
/// `--lambda` or a `lambda.txt` beside the input.
pub fn cmd_solve(cfg: &RunConfig) -> Result<i32, Failure> {
    let setup = resolve(cfg)?;
    let v_path = cfg
        .v_csv
        .as_deref()
        .ok_or_else(|| config_err("--v-csv is required for solve"))?;
    let v = io::read_density_csv(v_path)?;
    let grid = v.grid().clone();
    if grid.dim() != setup.experiment.model.dim() {
        return Err(config_err(format!(
            "density in {v_path} is {}-dimensional, experiment expects {}",
            grid.dim(),
            setup.experiment.model.dim()
        )));
    }

    let rate = match cfg.lambda {
        Some(l) => l.abs(),
        None => {
            let sibling = Path::new(v_path).with_file_name("lambda.txt");
            io::read_scalar(&sibling).map_err(|e| {
                config_err(format!(
                    "no --lambda given and {} is unusable: {e}",
                    sibling.display()
                ))
            })?
        }
    };

    let out = out_dir(cfg);
    let prov = cfg.provenance();
    dump_operator_if_asked(cfg, &setup.experiment.model, &grid, &out, &prov)?;
    let (u, report) = solve_density(&setup.experiment.model, &grid, -rate, &v, cfg)?;
    io::write_density_csv(out.join("u.csv"), &u, Some(&prov))?;
    io::write_key_values(out.join("solve_report.txt"), &solve_entries(&report), Some(&prov))?;
    println!(
        "solved at lambda {rate:.6}, residual {:.3e}, wrote {}",
        report.residual_norm,
        out.display()
    );
    Ok(0)
}

struct CouplingStage {
    gamma: f64,
    taus: usize,
}

fn run_coupling_stage(
    cfg: &RunConfig,
    setup: &Setup,
    horizon: f64,
    out: &Path,
    prov: &str,
) -> Result<CouplingStage, Failure> {
    let mut ccfg = CouplingConfig::new(cfg.dt.unwrap_or(setup.dt), horizon);
    if let Some(t) = cfg.threshold {
        ccfg.threshold = ThresholdRule::Fixed(t);
    }
    if let Some(far) = cfg.far.as_deref() {
        ccfg.scheme_far = match far {
            "reflection" => FarScheme::Reflection,
            "independent" => FarScheme::Independent,
            other => {
                return Err(config_err(format!(
                    "unknown far scheme `{other}` (expected reflection or independent)"
                )))
            }
        };
    }

    let mirrors = mirror_set(&setup.experiment.absorbing);
    let y0 = cfg
        .y0
        .clone()
        .unwrap_or_else(|| grid_center(&setup.grid));
    let samples = cfg.samples.unwrap_or(2000);
    let seed = cfg.seed.unwrap_or(0);

    let sample = estimate_coupling_times(
        &setup.experiment.model,
        &mirrors,
        &ccfg,
        &setup.x0,
        &y0,
        samples,
        seed,
        0,
    )?;
    io::write_taus(out.join("coupling_taus.txt"), &sample.taus, Some(prov))?;

    let width_cap = cfg.width_cap.unwrap_or(DEFAULT_TAIL_WIDTH_CAP);
    let fit = fit_exponential_tail(&sample, None, width_cap)?;
    io::write_survival_csv(out.join("coupling_tail.csv"), &fit.points, Some(prov))?;
    if !fit.accepted {
        return Err(Failure::FitRejected(format!(
            "coupling tail rejected: band width {:.4} at t={:.4} exceeds the cap {:.4}; \
             run more pairs (increase --samples)",
            fit.width_at_start, fit.t_start, width_cap
        )));
    }
    Ok(CouplingStage {
        gamma: fit.gamma,
        taus: sample.taus.len(),
    })
}

/// Pair two chains, collect coupling times, and fit the contraction rate.
pub fn cmd_couple(cfg: &RunConfig) -> Result<i32, Failure> {
    let setup = resolve(cfg)?;
    let horizon = cfg.horizon.unwrap_or(1.0);
    let out = out_dir(cfg);
    let prov = cfg.provenance();
    let stage = run_coupling_stage(cfg, &setup, horizon, &out, &prov)?;
    io::write_scalar(out.join("gamma.txt"), stage.gamma, Some(&prov))?;
    if cfg.horizon.is_some() {
        io::write_scalar(
            out.join("alpha.txt"),
            (-stage.gamma * horizon).exp(),
            Some(&prov),
        )?;
    }
    println!(
        "gamma {:.6} from {} coupled pairs, wrote {}",
        stage.gamma,
        stage.taus,
        out.display()
    );
    Ok(0)
}

/// Contraction rate plus finite-time coupling error, combined into a bound
/// on the stationary sensitivity of the QSD.
pub fn cmd_sensitivity(cfg: &RunConfig) -> Result<i32, Failure> {
    let setup = resolve(cfg)?;
    let case = parse_case(
        cfg.case
            .as_deref()
            .ok_or_else(|| config_err("--case is required (reflection or demographic)"))?,
    )?;
    let horizon = cfg
        .horizon
        .ok_or_else(|| config_err("--horizon is required for sensitivity runs"))?;

    let out = out_dir(cfg);
    let prov = cfg.provenance();

    let gamma = match cfg.gamma {
        Some(g) => g,
        None => run_coupling_stage(cfg, &setup, horizon, &out, &prov)?.gamma,
    };

    let mut protocol =
        WindowProtocol::new(horizon, cfg.windows.unwrap_or(2000), cfg.dt.unwrap_or(setup.dt));
    if let Some(b) = cfg.burn_in {
        protocol = protocol.with_burn_in(b);
    }
    if let Some(t) = cfg.history_thin {
        protocol.history_thin = t;
    }

    let seed = cfg.seed.unwrap_or(0);
    let mut rng = RngStream::new(seed, WINDOW_STREAM);
    let finite = match case {
        SensitivityCase::Reflection => finite_time_error_reflection(
            &setup.experiment.model,
            &setup.experiment.absorbing,
            &protocol,
            &setup.x0,
            &mut rng,
        )?,
        SensitivityCase::Demographic => {
            if setup.experiment.name != "lotka_volterra" {
                return Err(config_err(
                    "the demographic case is wired for lotka_volterra",
                ));
            }
            let base = models::lv_base_model(cfg.sigma.unwrap_or(models::LV_SIGMA));
            let mut pair = DemographicPair::new(&base, cfg.epsilon.unwrap_or(models::LV_EPSILON));
            if let Some(m) = cfg.matching.as_deref() {
                pair.matching = parse_matching(m)?;
            }
            finite_time_error_demographic(
                &pair,
                &setup.experiment.absorbing,
                &protocol,
                &setup.x0,
                &mut rng,
            )?
        }
    };

    let report = SensitivityReport::assemble(case, horizon, &finite, gamma)?;
    io::write_scalar(out.join("gamma.txt"), report.gamma, Some(&prov))?;
    io::write_scalar(out.join("finite_error.txt"), report.finite_error, Some(&prov))?;
    io::write_scalar(out.join("bound.txt"), report.bound, Some(&prov))?;
    io::write_key_values(
        out.join("report.txt"),
        &io::sensitivity_entries(&report),
        Some(&prov),
    )?;
    io::append_sensitivity_summary(
        out.join("sensitivity_summary.csv"),
        &report,
        Some(&cfg.hash()),
    )?;

    println!(
        "{} case: gamma {:.6}, finite error {:.6}, bound {:.6} over {} windows \
         (kill prob {:.4}), wrote {}",
        report.case,
        report.gamma,
        report.finite_error,
        report.bound,
        report.windows,
        report.kill_prob,
        out.display()
    );
    Ok(0)
}
