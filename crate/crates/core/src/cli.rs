//! `lasercal` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::calibrators::{calibrate, extrinsic_error, report_update, Algorithm, CalibrationOptions, UpdateReport};
use crate::dataset::{parse_json, read_dataset, read_json_file, write_dataset, write_json_file};
use crate::error::{Error, Result};
use crate::factors::NoiseParams;
use crate::lie::Pose;
use crate::metrics::{point_disparity, write_csv_file, DisparityStats};
use crate::scene::register_point;
use crate::solver::{SolveOptions, SolveReport};
use crate::synth::{synthesize, ScenarioSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

pub const RESULT_SCHEMA_VERSION: &str = "lasercal-result/1";

#[derive(Debug, Parser)]
#[command(name = "lasercal", version, about = "Laser-to-INS extrinsic calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic patch-test dataset.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the extrinsic from a dataset.
    Calibrate(CalibrateArgs),
    /// Per-point disparity of the map registered with a calibration result.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// result.json from `calibrate`.
        #[arg(long)]
        extrinsic: PathBuf,
        /// Per-point CSV; summary statistics go next to it as `<stem>.stats.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = crate::metrics::DEFAULT_BINS)]
        bins: usize,
    },
    /// Print the extrinsic update of a calibration result.
    Report {
        #[arg(long)]
        result: PathBuf,
    },
    /// Check a dataset against the schema.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long, value_parser = ["1", "2", "3"])]
    alg: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with `solve` and `noise` sections; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    update_tolerance: Option<f64>,
    #[arg(long)]
    relative_cost_tolerance: Option<f64>,
    #[arg(long)]
    initial_damping: Option<f64>,
    /// Huber threshold on whitened reprojection residuals.
    #[arg(long)]
    huber: Option<f64>,
    #[arg(long)]
    observability_threshold: Option<f64>,
}

/// Contents of the `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub solve: SolveOptions,
    /// Replaces the noise parameters stored in the dataset.
    pub noise: Option<NoiseParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorEcho {
    pub mean: Pose,
    pub sigma_phi: f64,
    pub sigma_rho: f64,
}

/// Every setting the calibration ran with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveConfig {
    pub algorithm: Algorithm,
    pub data: String,
    pub config_file: Option<String>,
    pub solve: SolveOptions,
    pub noise: NoiseParams,
    pub prior: PriorEcho,
    pub initial_extrinsic: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthError {
    pub rotation_deg: f64,
    pub translation_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationOutput {
    pub schema_version: String,
    pub config: EffectiveConfig,
    pub extrinsic: Pose,
    pub update: UpdateReport,
    pub solve: SolveReport,
    pub warnings: Vec<String>,
    /// Estimated vehicle pose at each observation, per submap. Absent when
    /// the navigation poses were held fixed.
    pub posterior_vehicle_poses: Option<Vec<Vec<Pose>>>,
    pub ground_truth_error: Option<TruthError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationOutput {
    pub data: String,
    pub result: String,
    pub algorithm: Algorithm,
    pub submaps: usize,
    pub stats: DisparityStats,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::IndefiniteSystem
        | Error::DivergenceDetected(_)
        | Error::BlockMismatch { .. }
        | Error::UnknownStateId(_)
        | Error::AngleNearPi { .. } => EXIT_SOLVER,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Simulate { spec, out } => simulate(&spec, &out),
        Command::Calibrate(args) => calibrate_cmd(&args),
        Command::Evaluate {
            data,
            extrinsic,
            out,
            bins,
        } => evaluate(&data, &extrinsic, &out, bins),
        Command::Report { result } => report(&result),
        Command::Validate { data } => validate(&data),
    }
}

fn simulate(spec_path: &Path, out: &Path) -> Result<()> {
    let spec: ScenarioSpec = parse_json(&std::fs::read_to_string(spec_path)?, spec_path)?;
    spec.validate()?;
    let scenario = synthesize(&spec)?;
    write_dataset(&scenario, out)?;
    let n_obs: usize = scenario.submaps.iter().map(|s| s.observations().len()).sum();
    eprintln!(
        "wrote {}: {} submaps, {} observations, {} correspondences",
        out.display(),
        scenario.submaps.len(),
        n_obs,
        scenario.correspondences.len()
    );
    Ok(())
}

fn effective_options(args: &CalibrateArgs) -> Result<CalibrateConfig> {
    let mut config = match &args.config {
        Some(path) => read_json_file::<CalibrateConfig>(path)?,
        None => CalibrateConfig::default(),
    };
    let s = &mut config.solve;
    if let Some(v) = args.max_iterations {
        s.max_iterations = v;
    }
    if let Some(v) = args.update_tolerance {
        s.update_tolerance = v;
    }
    if let Some(v) = args.relative_cost_tolerance {
        s.relative_cost_tolerance = v;
    }
    if let Some(v) = args.initial_damping {
        s.initial_damping = v;
    }
    if let Some(v) = args.huber {
        s.huber = Some(v);
    }
    if let Some(v) = args.observability_threshold {
        s.observability_threshold = v;
    }
    Ok(config)
}

fn calibrate_cmd(args: &CalibrateArgs) -> Result<()> {
    let algorithm = args
        .alg
        .parse()
        .ok()
        .and_then(Algorithm::from_number)
        .expect("clap restricts --alg to 1, 2 or 3");
    let config = effective_options(args)?;
    let mut scenario = read_dataset(&args.data)?;
    if let Some(noise) = config.noise {
        noise.validate()?;
        scenario.noise = noise;
    }
    let options = CalibrationOptions { solve: config.solve };
    let result = calibrate(algorithm, &scenario, &options)?;
    let update = report_update(&result, &scenario.prior)?;
    let posterior_vehicle_poses = result.posterior_submaps.as_ref().map(|subs| {
        subs.iter()
            .map(|s| (0..s.observations().len()).map(|k| s.vehicle_pose(k)).collect())
            .collect()
    });
    let ground_truth_error = scenario.ground_truth.as_ref().map(|g| {
        let (angle, dist) = extrinsic_error(&result.extrinsic, &g.extrinsic);
        TruthError {
            rotation_deg: angle.to_degrees(),
            translation_mm: dist * 1e3,
        }
    });
    let output = CalibrationOutput {
        schema_version: RESULT_SCHEMA_VERSION.into(),
        config: EffectiveConfig {
            algorithm,
            data: args.data.display().to_string(),
            config_file: args.config.as_ref().map(|p| p.display().to_string()),
            solve: options.solve,
            noise: scenario.noise,
            prior: PriorEcho {
                mean: scenario.prior.mean,
                sigma_phi: scenario.prior.sigma_phi,
                sigma_rho: scenario.prior.sigma_rho,
            },
            initial_extrinsic: scenario.initial_extrinsic(),
        },
        extrinsic: result.extrinsic,
        update,
        solve: result.solve_report.clone(),
        warnings: result.warnings.clone(),
        posterior_vehicle_poses,
        ground_truth_error,
    };
    write_json_file(&output, &args.out)?;
    for w in &output.update.observability_warnings {
        eprintln!("warning: {w}");
    }
    if let Some(e) = &output.ground_truth_error {
        eprintln!(
            "error against ground truth: {:.3e} deg, {:.3e} mm",
            e.rotation_deg, e.translation_mm
        );
    }
    eprintln!(
        "algorithm {} finished in {} iterations ({}), final cost {:.6e}",
        algorithm.number(),
        output.solve.iterations,
        if output.solve.converged {
            "converged"
        } else {
            "not converged"
        },
        output.solve.final_cost
    );
    Ok(())
}

fn evaluate(data: &Path, result_path: &Path, out: &Path, bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::InsufficientData("--bins must be at least 1".into()));
    }
    let scenario = read_dataset(data)?;
    let result: CalibrationOutput = read_json_file(result_path)?;
    let deviation = result.extrinsic.rotation.orthonormality_deviation();
    if !(deviation <= crate::dataset::ROTATION_TOLERANCE) {
        return Err(Error::NonOrthonormalRotation {
            path: result_path.to_path_buf(),
            field: "extrinsic.rotation".into(),
            deviation,
        });
    }
    let ext = result.extrinsic;
    let clouds: Vec<Vec<Vector3<f64>>> = match &result.posterior_vehicle_poses {
        Some(per_submap) => {
            if per_submap.len() != scenario.submaps.len()
                || per_submap
                    .iter()
                    .zip(&scenario.submaps)
                    .any(|(p, s)| p.len() != s.observations().len())
            {
                return Err(Error::SchemaViolation {
                    path: result_path.to_path_buf(),
                    field: "posterior_vehicle_poses".into(),
                    reason: "shape does not match the dataset observations".into(),
                });
            }
            per_submap
                .iter()
                .zip(&scenario.submaps)
                .map(|(poses, s)| {
                    poses
                        .iter()
                        .zip(s.observations())
                        .map(|(t, o)| register_point(t, &ext, &o.point_laser))
                        .collect()
                })
                .collect()
        }
        None => scenario.submaps.iter().map(|s| s.world_keypoints(&ext)).collect(),
    };
    let mut report = point_disparity(&clouds)?;
    let stats = crate::metrics::summarize(&report.per_point, bins)?;
    report.histogram = stats.histogram.clone();
    write_csv_file(&report, out)?;
    let stats_path = out.with_extension("stats.json");
    write_json_file(
        &EvaluationOutput {
            data: data.display().to_string(),
            result: result_path.display().to_string(),
            algorithm: result.config.algorithm,
            submaps: clouds.len(),
            stats,
        },
        &stats_path,
    )?;
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "points = {}\nmedian disparity = {:.3} cm\nmean disparity = {:.3} cm",
        report.per_point.len(),
        report.median * 100.0,
        report.mean * 100.0
    )?;
    Ok(())
}

fn report(result_path: &Path) -> Result<()> {
    let result: CalibrationOutput = read_json_file(result_path)?;
    let mut stdout = std::io::stdout().lock();
    write!(stdout, "{}", result.update)?;
    Ok(())
}

fn validate(data: &Path) -> Result<()> {
    let scenario = read_dataset(data)?;
    let n_obs: usize = scenario.submaps.iter().map(|s| s.observations().len()).sum();
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "{}: valid ({} submaps, {} observations, {} correspondences, ground truth {})",
        data.display(),
        scenario.submaps.len(),
        n_obs,
        scenario.correspondences.len(),
        if scenario.ground_truth.is_some() {
            "present"
        } else {
            "absent"
        }
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["lasercal"]), EXIT_USAGE);
        assert_eq!(run(["lasercal", "frobnicate"]), EXIT_USAGE);
        assert_eq!(
            run(["lasercal", "calibrate", "--alg", "4", "--data", "x", "--out", "y"]),
            EXIT_USAGE
        );
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["lasercal", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_input_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.json");
        let code = run([
            OsString::from("lasercal"),
            "validate".into(),
            "--data".into(),
            missing.into_os_string(),
        ]);
        assert_eq!(code, EXIT_DATA);
    }

    #[test]
    fn config_file_is_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("cfg.json");
        std::fs::write(&cfg, r#"{"solve": {"max_iterations": 7, "huber": 2.0}}"#).unwrap();
        let args = CalibrateArgs::parse_args(&[
            "--alg",
            "1",
            "--data",
            "d",
            "--out",
            "o",
            "--config",
            cfg.to_str().unwrap(),
            "--max-iterations",
            "9",
        ]);
        let c = effective_options(&args).unwrap();
        assert_eq!(c.solve.max_iterations, 9);
        assert_eq!(c.solve.huber, Some(2.0));
        assert_eq!(c.solve.update_tolerance, SolveOptions::default().update_tolerance);
    }

    impl CalibrateArgs {
        fn parse_args(a: &[&str]) -> Self {
            #[derive(Parser)]
            struct Wrap {
                #[command(flatten)]
                inner: CalibrateArgs,
            }
            Wrap::try_parse_from(std::iter::once("x").chain(a.iter().copied()))
                .unwrap()
                .inner
        }
    }
}
