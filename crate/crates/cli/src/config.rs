//! Run configuration: a flat key-value TOML file merged with command-line
//! overrides. Unknown keys in the file are rejected so typos fail loudly
//! instead of silently running defaults. The merged configuration is hashed
//! (FNV-1a over its canonical serialization) and the hash is stamped into
//! every output file as provenance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Deserialize, Serialize, clap::Args)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Built-in system to run (ou, wright_fisher, ring, single_well,
    /// double_well, lotka_volterra, rossler).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,

    /// Sampler steps, scientific notation accepted (e.g. 1e7).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<f64>,

    /// Integrator step size; defaults to the experiment's setting.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    /// Grid cells per axis, overriding the experiment's grid.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<usize>>,

    /// Boundary-crossing correction: off, constant, or modified.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bridge: Option<String>,

    /// Integrator: euler or milstein; defaults to the experiment's setting.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,

    /// Blocks per axis for the block solver (omit for a global solve).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<usize>>,

    /// Cells of overlap added to each block side.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<usize>,

    /// Shifted relaxation passes after the first collage.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift_passes: Option<usize>,

    /// Sensitivity case: reflection or demographic.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case: Option<String>,

    /// Window length T for coupling and sensitivity runs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,

    /// Number of measurement windows.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub windows: Option<usize>,

    /// Warm-up windows excluded from the error average.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,

    /// Environmental noise level for lotka_volterra.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,

    /// Demographic noise level for lotka_volterra.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,

    /// Demographic noise matching: add or subtract.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matching: Option<String>,

    /// Contraction rate; skips the coupling stage when given.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,

    /// Coupling pairs to simulate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,

    /// Starting state (defaults to the experiment's).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,

    /// Second chain's starting state for coupling runs.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,

    /// Fixed distance below which the pair switches to the gluing step
    /// (default: chosen from the step size and noise level).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,

    /// Far-apart coupling scheme: reflection or independent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub far: Option<String>,

    /// Acceptance cap on the survival-band width at the tail start.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width_cap: Option<f64>,

    /// Killing rate for `solve` (positive magnitude or signed eigenvalue);
    /// defaults to lambda.txt next to the input density.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,

    /// Input density CSV for `solve`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_csv: Option<String>,

    /// Independent trajectories splitting the step budget.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<u64>,

    /// Leading fraction of each trajectory dropped before recording.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in_fraction: Option<f64>,

    /// Record every n-th unabsorbed state into the regeneration history.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history_thin: Option<usize>,

    /// Worker threads (overrides the QSD_WORKERS environment variable).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,

    /// Where output files go (created if missing).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,

    /// Also write the discretized operator in Matrix Market form.
    #[arg(long, default_value_t = false)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub dump_operator: bool,
}

impl RunConfig {
    /// File values fill in wherever the command line left a field unset.
    pub fn merged_over(mut self, file: RunConfig) -> RunConfig {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if self.$field.is_none() { self.$field = file.$field; })*
            };
        }
        take!(
            experiment, steps, dt, seed, cells, bridge, scheme, blocks, overlap, shift_passes,
            case, horizon, windows, burn_in, sigma, epsilon, matching, gamma, samples, x0, y0,
            threshold, far, width_cap, lambda, v_csv, trajectories, burn_in_fraction,
            history_thin, workers, out_dir
        );
        self.dump_operator |= file.dump_operator;
        self
    }

    pub fn canonical(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    /// FNV-1a over the canonical form, as a fixed-width hex tag.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in self.canonical().bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn provenance(&self) -> String {
        format!("config {}", self.hash())
    }
}

pub fn load_config_file(path: &Path) -> Result<RunConfig, String> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("bad config file {}: {e}", path.display()))
}
