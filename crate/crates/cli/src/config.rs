//! The `--config` TOML file. Every section and key is optional; missing keys
//! take their defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scalesplat::losses::LossWeights;
use scalesplat::optim::{InitConfig, LearningRates, TrainConfig};
use scalesplat::posegraph::SolverConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub paths: Paths,
    pub constraints: Constraints,
    pub solver: SolverConfig,
    pub train: TrainSection,
    pub loss: LossWeights,
    pub init: InitConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub trajectory: Option<PathBuf>,
    pub extrinsic: Option<PathBuf>,
    pub camera_times: Option<PathBuf>,
    pub colmap: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub normals: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Constraints {
    pub use_priors: bool,
    pub prior_rotation_weight: f64,
    pub prior_translation_weight: f64,
    pub use_relatives: bool,
    pub relative_rotation_weight: f64,
    pub relative_translation_weight: f64,
}

impl Default for Constraints {
    fn default() -> Self {
        Self {
            use_priors: true,
            prior_rotation_weight: 1e4,
            prior_translation_weight: 1e4,
            use_relatives: true,
            relative_rotation_weight: 1e4,
            relative_translation_weight: 1e4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub snapshot_every: usize,
    pub holdout_every: usize,
    pub learning_rates: LearningRates,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            iterations: d.iterations,
            snapshot_every: d.snapshot_every,
            holdout_every: d.holdout_every,
            learning_rates: d.learning_rates,
        }
    }
}

/// Every config key with a one-line description, rendered into `--help`.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "RNG seed for training and gradient checks (default 0)"),
    ("paths.trajectory", "LiDAR odometry, TUM format (world <- lidar)"),
    ("paths.extrinsic", "lidar <- camera extrinsic, one `tx ty tz qx qy qz qw` line"),
    ("paths.camera_times", "`image_name timestamp` per line"),
    ("paths.colmap", "COLMAP text model directory (cameras/images/points3D.txt)"),
    ("paths.images", "directory of RGB training images named as in the model"),
    ("paths.normals", "directory of normal maps (<stem>.pfm or <stem>.png)"),
    ("paths.output", "output directory or file"),
    ("constraints.use_priors", "anchor poses to interpolated odometry (default true)"),
    ("constraints.prior_rotation_weight", "prior information on rotation, 1/rad^2 (default 1e4)"),
    ("constraints.prior_translation_weight", "prior information on translation, 1/m^2 (default 1e4)"),
    ("constraints.use_relatives", "add odometry relative-pose constraints between consecutive images (default true)"),
    ("constraints.relative_rotation_weight", "relative information on rotation (default 1e4)"),
    ("constraints.relative_translation_weight", "relative information on translation (default 1e4)"),
    ("solver.max_iterations", "LM iterations per round (default 100)"),
    ("solver.relative_cost_tolerance", "stop when the relative cost decrease falls below this (default 1e-8)"),
    ("solver.gradient_tolerance", "stop when the gradient max-norm falls below this (default 1e-10)"),
    ("solver.initial_lambda", "initial LM damping (default 1e-4)"),
    ("solver.lambda_up", "damping multiplier on a rejected step (default 10)"),
    ("solver.lambda_down", "damping multiplier on an accepted step (default 0.1)"),
    ("solver.max_lambda", "give up once damping exceeds this (default 1e12)"),
    ("solver.huber_delta_px", "Huber threshold on reprojection error, pixels (default 2)"),
    ("solver.reprojection_weight", "information weight of each reprojection residual (default 1)"),
    ("solver.outlier_rounds", "re-solves after removing outlier observations (default 2)"),
    ("solver.max_reprojection_error_px", "outlier threshold, pixels (default 4)"),
    ("train.iterations", "optimisation steps (default 3000)"),
    ("train.snapshot_every", "write a PLY snapshot every N steps, 0 disables (default 0)"),
    ("train.holdout_every", "hold out views with index % N == 0, 0 disables (default 8)"),
    ("train.learning_rates.mean", "Adam step for positions (default 1.6e-4)"),
    ("train.learning_rates.log_scale", "Adam step for log-scales (default 5e-3)"),
    ("train.learning_rates.rotation", "Adam step for quaternions (default 1e-3)"),
    ("train.learning_rates.opacity", "Adam step for opacity logits (default 5e-2)"),
    ("train.learning_rates.color", "Adam step for SH coefficients (default 2.5e-3)"),
    ("loss.lambda_ssim", "D-SSIM share of the photometric loss (default 0.2)"),
    ("loss.lambda_en", "effective-rank loss weight (default 0.01)"),
    ("loss.lambda_smooth", "normal smoothness weight (default 0.5)"),
    ("loss.eps_erank", "epsilon inside the effective-rank log (default 1e-6)"),
    ("loss.lambda_scale", "min-scale loss weight (default 1)"),
    ("loss.lambda_normal", "normal consistency weight (default 1)"),
    ("loss.normal_weighting", "`grad_pow5` or `one_minus_grad` (default grad_pow5)"),
    ("init.opacity", "initial opacity of seeded primitives (default 0.1)"),
    ("init.neighbors", "neighbours used to size seeded primitives (default 3)"),
    ("init.fallback_scale", "scale of a primitive with no neighbours (default 0.01)"),
];

pub fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from(
        "Config file keys (TOML, all optional, unknown keys rejected; command-line flags override them):\n",
    );
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<width$}  {d}\n"));
    }
    s.push_str("\nEnvironment:\n  SCALESPLAT_THREADS  worker thread count (default: all cores)\n");
    s.push_str("\nExit codes: 0 success, 2 input error, 3 no convergence, 4 numeric failure\n");
    s
}

impl Config {
    /// Reads a config file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Config = toml::from_str(&text)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.trajectory,
            &mut p.extrinsic,
            &mut p.camera_times,
            &mut p.colmap,
            &mut p.images,
            &mut p.normals,
            &mut p.output,
        ] {
            if let Some(v) = slot.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iterations,
            learning_rates: self.train.learning_rates,
            weights: self.loss,
            seed: self.seed,
            snapshot_every: self.train.snapshot_every,
            holdout_every: self.train.holdout_every,
        }
    }
}

/// A required path: must be configured and must exist.
pub fn require(slot: &Option<PathBuf>, what: &str, flag: &str) -> CliResult<PathBuf> {
    let p = slot
        .clone()
        .ok_or_else(|| CliError::Input(format!("no {what} given (use {flag} or the config file)")))?;
    if !p.exists() {
        return Err(CliError::missing(what, &p));
    }
    Ok(p)
}

/// A required output path; it need not exist yet.
pub fn output(slot: &Option<PathBuf>) -> CliResult<PathBuf> {
    slot.clone()
        .ok_or_else(|| CliError::Input("no output path given (use --output or the config file)".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_keys(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    leaf_keys(v, &key, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn key_table_matches_the_config_exactly() {
        let mut cfg = Config::default();
        let x = Some(PathBuf::from("x"));
        cfg.paths = Paths {
            trajectory: x.clone(),
            extrinsic: x.clone(),
            camera_times: x.clone(),
            colmap: x.clone(),
            images: x.clone(),
            normals: x.clone(),
            output: x,
        };
        let mut keys = Vec::new();
        leaf_keys(&toml::Value::try_from(&cfg).unwrap(), "", &mut keys);
        keys.sort();
        let mut documented: Vec<String> = KEYS.iter().map(|(k, _)| k.to_string()).collect();
        documented.sort();
        assert_eq!(keys, documented);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("sead = 1").is_err());
        assert!(toml::from_str::<Config>("[solver]\nmax_iter = 1").is_err());
        assert!(toml::from_str::<Config>("[train.learning_rates]\nmeans = 1.0").is_err());
        let c: Config = toml::from_str("seed = 4\n[loss]\nlambda_en = 0.0").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.loss.lambda_en, 0.0);
        assert_eq!(c.loss.lambda_smooth, 0.5);
    }

    #[test]
    fn relative_paths_resolve_against_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[paths]\ncolmap = \"sparse\"\noutput = \"/abs/out\"\n").unwrap();
        let c = Config::load(&p).unwrap();
        assert_eq!(c.paths.colmap, Some(dir.path().join("sparse")));
        assert_eq!(c.paths.output, Some(PathBuf::from("/abs/out")));
    }
}
