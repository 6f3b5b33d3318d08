//! Seeded patch-test scenarios with known ground truth.
//!
//! The vehicle flies straight passes over a small patch of undulating seabed,
//! headings spread evenly over half a turn so every pair of passes crosses
//! near the patch center. Keypoints are scattered over the patch; a keypoint
//! is observed by a pass when the across-track laser plane sweeps over it and
//! it falls inside the swath. Correspondences are made by keypoint identity.
//!
//! World frame is NED with its origin on the sea surface above the patch.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::factors::{reprojection, NoiseParams, ReprojectionLeg, StateId};
use crate::lie::{se3_exp, Pose, Rotation, Twist};
use crate::scene::{
    build_submaps, default_keypoint_covariance, Correspondence, ExtrinsicPrior, KeypointObservation, ObservationRef,
    Submap, TimedPose, Trajectory,
};

/// Rotation taking ENU laser coordinates to NED body coordinates.
pub fn enu_to_ned() -> Rotation {
    Rotation::from_matrix_unchecked(Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0))
}

/// Mounting used when a spec does not give one: ENU-to-NED with a small
/// misalignment, laser slightly aft and below the INS.
pub fn default_true_extrinsic() -> Pose {
    let tweak = Rotation::exp(&Vector3::new(0.6, -0.4, 1.1).map(f64::to_radians));
    Pose::new(enu_to_ned() * tweak, Vector3::new(-0.7532, 0.021, 0.112))
}

/// Floor added to emitted pose covariances so they stay invertible.
pub const POSE_COVARIANCE_FLOOR: [f64; 6] = [1e-12, 1e-12, 1e-12, 1e-10, 1e-10, 1e-10];

/// Floor on the emitted relative-pose sigmas, per square-root second.
pub const RELPOSE_SIGMA_FLOOR: [f64; 6] = [1e-6, 1e-6, 1e-6, 1e-6, 1e-6, 1e-6];

/// Probability of the chi-square gate.
pub const GATE_PROBABILITY: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    /// Zero roll and pitch.
    Planar,
    /// Roll and pitch sinusoids of the given amplitude (rad).
    Excited { amplitude: f64 },
}

/// Rotation (rad) and translation (m) magnitudes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub rotation: f64,
    pub translation: f64,
}

impl DriftSpec {
    pub fn is_zero(&self) -> bool {
        self.rotation == 0.0 && self.translation == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    /// Mean seabed depth below the surface, m.
    pub seabed_depth: f64,
    /// Amplitude of the seabed undulation, m.
    pub relief: f64,
    pub altitude: f64,
    /// Amplitude of vehicle depth excursions, m.
    pub depth_excursion: f64,
    pub pass_length: f64,
    pub speed: f64,
    /// DVL-INS output rate, Hz.
    pub pose_rate: f64,
    /// Laser half-swath angle, rad.
    pub half_swath: f64,
    /// Radius of the keypoint patch around the crossing, m.
    pub field_radius: f64,
    /// Maximum lateral offset of a pass from the patch center, m.
    pub lateral_offset: f64,
    /// Minimum distance between keypoints, m; 0 disables.
    pub min_keypoint_spacing: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            seabed_depth: 20.0,
            relief: 0.3,
            altitude: 5.0,
            depth_excursion: 0.5,
            pass_length: 20.0,
            speed: 1.0,
            pose_rate: 1.0,
            half_swath: 25f64.to_radians(),
            field_radius: 4.0,
            lateral_offset: 0.3,
            min_keypoint_spacing: 0.0,
        }
    }
}

impl Geometry {
    pub fn swath_width(&self) -> f64 {
        2.0 * self.altitude * self.half_swath.tan()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub n_submaps: usize,
    pub keypoints_per_pair: usize,
    pub motion: Motion,
    #[serde(default = "default_true_extrinsic")]
    pub true_extrinsic: Pose,
    /// `(phi, rho)`: prior rotation `C_true exp(phi^)`, translation `r_true + rho`.
    #[serde(default)]
    pub prior_offset: [f64; 6],
    #[serde(default = "default_prior_sigma_phi")]
    pub prior_sigma_phi: f64,
    #[serde(default = "default_prior_sigma_rho")]
    pub prior_sigma_rho: f64,
    /// Starting extrinsic for the solvers, same convention as `prior_offset`.
    /// When absent the solvers start from the prior mean.
    #[serde(default)]
    pub initial_offset: Option<[f64; 6]>,
    #[serde(default)]
    pub global_drift: DriftSpec,
    /// Per-step standard deviation of the intra-submap random walk.
    #[serde(default)]
    pub local_drift: DriftSpec,
    #[serde(default)]
    pub point_noise_sigma: f64,
    #[serde(default)]
    pub outlier_fraction: f64,
    #[serde(default)]
    pub geometry: Geometry,
    /// Overrides the noise parameters otherwise derived from the drift.
    #[serde(default)]
    pub noise: Option<NoiseParams>,
}

fn default_prior_sigma_phi() -> f64 {
    1f64.to_radians()
}

fn default_prior_sigma_rho() -> f64 {
    0.05
}

impl ScenarioSpec {
    /// Noiseless, drift-free spec with the given motion.
    pub fn new(seed: u64, n_submaps: usize, keypoints_per_pair: usize, motion: Motion) -> Self {
        ScenarioSpec {
            seed,
            n_submaps,
            keypoints_per_pair,
            motion,
            true_extrinsic: default_true_extrinsic(),
            prior_offset: [0.0; 6],
            prior_sigma_phi: default_prior_sigma_phi(),
            prior_sigma_rho: default_prior_sigma_rho(),
            initial_offset: None,
            global_drift: DriftSpec::default(),
            local_drift: DriftSpec::default(),
            point_noise_sigma: 0.0,
            outlier_fraction: 0.0,
            geometry: Geometry::default(),
            noise: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.n_submaps < 2 {
            return bad(format!("n_submaps = {} (need at least 2)", self.n_submaps));
        }
        if self.keypoints_per_pair < 2 {
            return bad("keypoints_per_pair must be at least 2".into());
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return bad(format!("outlier_fraction {} outside [0, 0.5)", self.outlier_fraction));
        }
        let sigmas = [
            self.global_drift.rotation,
            self.global_drift.translation,
            self.local_drift.rotation,
            self.local_drift.translation,
            self.point_noise_sigma,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return bad("drift magnitudes and noise sigmas must be non-negative".into());
        }
        if !(self.prior_sigma_phi > 0.0 && self.prior_sigma_rho > 0.0) {
            return bad("prior sigmas must be positive".into());
        }
        if let Motion::Excited { amplitude } = self.motion {
            if !(0.0..PI / 4.0).contains(&amplitude) {
                return bad(format!("excitation amplitude {amplitude} rad outside [0, pi/4)"));
            }
        }
        let g = &self.geometry;
        let positive = [
            g.altitude,
            g.pass_length,
            g.speed,
            g.pose_rate,
            g.half_swath,
            g.field_radius,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || g.half_swath >= PI / 2.0 {
            return bad("geometry lengths, rates and swath must be positive".into());
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        if self.true_extrinsic.rotation.orthonormality_deviation() > 1e-6 {
            return bad("true_extrinsic rotation is not orthonormal".into());
        }
        Ok(())
    }

    /// Applies an offset twist in the prior convention.
    pub fn offset_extrinsic(&self, offset: &[f64; 6]) -> Pose {
        let t = &self.true_extrinsic;
        Pose::new(
            t.rotation * Rotation::exp(&Vector3::new(offset[0], offset[1], offset[2])),
            t.translation + Vector3::new(offset[3], offset[4], offset[5]),
        )
    }

    pub fn prior(&self) -> Result<ExtrinsicPrior> {
        ExtrinsicPrior::new(
            self.offset_extrinsic(&self.prior_offset),
            self.prior_sigma_phi,
            self.prior_sigma_rho,
        )
    }

    /// Noise parameters: the override if given, else defaults with the
    /// relative-pose sigma matched to the local drift.
    pub fn noise_params(&self) -> NoiseParams {
        if let Some(n) = self.noise {
            return n;
        }
        let mut n = NoiseParams::default();
        let per_sqrt_s = self.geometry.pose_rate.sqrt();
        for (i, (sigma, floor)) in n.relpose_sigma.iter_mut().zip(RELPOSE_SIGMA_FLOOR).enumerate() {
            let step = if i < 3 {
                self.local_drift.rotation
            } else {
                self.local_drift.translation
            };
            *sigma = (step * per_sqrt_s).max(floor);
        }
        n
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingStats {
    pub inliers_before: usize,
    pub outliers_before: usize,
    pub inliers_dropped: usize,
    pub outliers_dropped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub extrinsic: Pose,
    pub trajectories: Vec<Trajectory>,
    /// World positions of all keypoints in the field.
    pub keypoints: Vec<Vector3<f64>>,
    /// Keypoint id behind each observation, per submap.
    pub observation_keypoints: Vec<Vec<usize>>,
    /// Per correspondence: true when it links two different keypoints.
    pub outliers: Vec<bool>,
    pub gating: Option<GatingStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub spec: Option<ScenarioSpec>,
    pub submaps: Vec<Submap>,
    pub correspondences: Vec<Correspondence>,
    pub prior: ExtrinsicPrior,
    pub noise: NoiseParams,
    /// Solver starting point when it differs from the prior mean.
    pub initial_extrinsic: Option<Pose>,
    pub ground_truth: Option<GroundTruth>,
}

impl Scenario {
    /// DVL-INS pose measurements, one trajectory per submap.
    pub fn dvlins_measurements(&self) -> impl Iterator<Item = &Trajectory> {
        self.submaps.iter().map(Submap::trajectory)
    }

    pub fn initial_extrinsic(&self) -> Pose {
        self.initial_extrinsic.unwrap_or(self.prior.mean)
    }

    /// Correspondence counts per unordered submap pair.
    pub fn pair_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for c in &self.correspondences {
            let key = (c.a.submap.min(c.b.submap), c.a.submap.max(c.b.submap));
            *counts.entry(key).or_insert(0) += 1;
        }
        counts
    }

    fn truth(&self) -> Result<&GroundTruth> {
        self.ground_truth
            .as_ref()
            .ok_or_else(|| Error::InsufficientData("scenario carries no ground truth".into()))
    }
}

/// Independent random stream per generation stage.
fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

const STAGE_GEOMETRY: u64 = 1;
const STAGE_KEYPOINTS: u64 = 2;
const STAGE_PAIRS: u64 = 3;
const STAGE_GLOBAL_DRIFT: u64 = 4;
const STAGE_LOCAL_DRIFT: u64 = 5;
const STAGE_POINT_NOISE: u64 = 6;
const STAGE_OUTLIERS: u64 = 7;

fn seabed_height(g: &Geometry, x: f64, y: f64) -> f64 {
    g.seabed_depth + g.relief * (2.0 * PI * x / 3.7).sin() * (2.0 * PI * y / 5.3).cos()
}

fn sample_keypoints(spec: &ScenarioSpec) -> Vec<Vector3<f64>> {
    let g = &spec.geometry;
    let mut rng = stage_rng(spec.seed, STAGE_KEYPOINTS);
    let w = g.swath_width();
    let area = PI * g.field_radius * g.field_radius;
    let target = (spec.keypoints_per_pair as f64 * area / (0.6 * w * w)).ceil() as usize;
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(target);
    let min2 = g.min_keypoint_spacing * g.min_keypoint_spacing;
    let mut attempts = 0;
    while out.len() < target && attempts < 200 * target {
        attempts += 1;
        let x = rng.random_range(-g.field_radius..g.field_radius);
        let y = rng.random_range(-g.field_radius..g.field_radius);
        if x * x + y * y > g.field_radius * g.field_radius {
            continue;
        }
        if min2 > 0.0 && out.iter().any(|p| (p.x - x).powi(2) + (p.y - y).powi(2) < min2) {
            continue;
        }
        out.push(Vector3::new(x, y, seabed_height(g, x, y)));
    }
    out
}

fn true_trajectories(spec: &ScenarioSpec) -> Result<Vec<Trajectory>> {
    let g = &spec.geometry;
    let mut rng = stage_rng(spec.seed, STAGE_GEOMETRY);
    let duration = g.pass_length / g.speed;
    let n_steps = (duration * g.pose_rate).round().max(1.0) as usize;
    let dt = duration / n_steps as f64;
    let mut out = Vec::with_capacity(spec.n_submaps);
    for i in 0..spec.n_submaps {
        let mut heading = PI * i as f64 / spec.n_submaps as f64;
        if i % 2 == 1 {
            heading += PI;
        }
        let dir = Vector3::new(heading.cos(), heading.sin(), 0.0);
        let across = Vector3::new(-heading.sin(), heading.cos(), 0.0);
        let lateral = rng.random_range(-g.lateral_offset..=g.lateral_offset);
        let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let start = dir * (-0.5 * g.pass_length) + across * lateral;
        let t0 = i as f64 * (duration + 100.0);
        let amplitude = match spec.motion {
            Motion::Planar => 0.0,
            Motion::Excited { amplitude } => amplitude,
        };
        let poses = (0..=n_steps)
            .map(|k| {
                let tau = k as f64 * dt;
                let roll = amplitude * (2.0 * PI * tau / 7.0 + phases[0]).sin();
                let pitch = amplitude * (2.0 * PI * tau / 11.0 + phases[1]).sin();
                let depth = g.seabed_depth - g.altitude + g.depth_excursion * (2.0 * PI * tau / 13.0 + phases[2]).sin();
                let mut p = start + dir * (g.speed * tau);
                p.z = depth;
                let c = Rotation::about_z(heading) * Rotation::about_y(pitch) * Rotation::about_x(roll);
                TimedPose::new(t0 + tau, Pose::new(c, p), floor_covariance())
            })
            .collect();
        out.push(Trajectory::new(i, poses)?);
    }
    Ok(out)
}

fn floor_covariance() -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::from_row_slice(&POSE_COVARIANCE_FLOOR))
}

/// Time at which the laser plane (body `x = 0`) sweeps over `p`, found by
/// bisection on the interpolated trajectory.
fn sweep_time(traj: &Trajectory, p: &Vector3<f64>) -> Result<Option<f64>> {
    let along = |t: f64| -> Result<f64> { Ok(traj.pose_at(t)?.inverse().transform_point(p).x) };
    let poses = traj.poses();
    for w in poses.windows(2) {
        let (mut a, mut b) = (w[0].t, w[1].t);
        let (mut fa, fb) = (along(a)?, along(b)?);
        if fa == 0.0 {
            return Ok(Some(a));
        }
        if fa.signum() == fb.signum() {
            continue;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            let fm = along(m)?;
            if fm == 0.0 {
                return Ok(Some(m));
            }
            if fm.signum() == fa.signum() {
                a = m;
                fa = fm;
            } else {
                b = m;
            }
        }
        return Ok(Some(0.5 * (a + b)));
    }
    Ok(None)
}

/// Clean, drift-free scenario: measurements equal ground truth.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let g = &spec.geometry;
    let trajectories = true_trajectories(spec)?;
    let keypoints = sample_keypoints(spec);
    let ext_inv = spec.true_extrinsic.inverse();
    let obs_cov = if spec.point_noise_sigma > 0.0 {
        Matrix3::identity() * spec.point_noise_sigma.powi(2)
    } else {
        default_keypoint_covariance()
    };

    let mut observations = Vec::with_capacity(trajectories.len());
    let mut observation_keypoints = Vec::with_capacity(trajectories.len());
    for traj in &trajectories {
        let mut seen: Vec<(f64, usize, Vector3<f64>)> = Vec::new();
        for (id, p) in keypoints.iter().enumerate() {
            let Some(t) = sweep_time(traj, p)? else { continue };
            let body = traj.pose_at(t)?.inverse().transform_point(p);
            if body.z <= 0.0 || body.y.abs().atan2(body.z) > g.half_swath {
                continue;
            }
            seen.push((t, id, ext_inv.transform_point(&body)));
        }
        seen.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        observation_keypoints.push(seen.iter().map(|s| s.1).collect::<Vec<_>>());
        observations.push(
            seen.iter()
                .map(|s| KeypointObservation::new(s.0, s.2, obs_cov))
                .collect::<Vec<_>>(),
        );
    }

    let mut rng = stage_rng(spec.seed, STAGE_PAIRS);
    let mut correspondences = Vec::new();
    for i in 0..trajectories.len() {
        let index_i: BTreeMap<usize, usize> = observation_keypoints[i]
            .iter()
            .enumerate()
            .map(|(k, id)| (*id, k))
            .collect();
        for (j, keypoints_j) in observation_keypoints.iter().enumerate().skip(i + 1) {
            let mut common: Vec<(usize, usize)> = keypoints_j
                .iter()
                .enumerate()
                .filter_map(|(k, id)| index_i.get(id).map(|ki| (*ki, k)))
                .collect();
            if common.len() < 2 {
                return Err(Error::InfeasibleSpec(format!(
                    "submaps {i} and {j} share {} keypoints (need at least 2)",
                    common.len()
                )));
            }
            common.shuffle(&mut rng);
            common.truncate(spec.keypoints_per_pair);
            common.sort_unstable();
            for (ki, kj) in common {
                correspondences.push(Correspondence::new(
                    ObservationRef { submap: i, index: ki },
                    ObservationRef { submap: j, index: kj },
                )?);
            }
        }
    }

    let n_corr = correspondences.len();
    let submaps = build_submaps(trajectories.clone(), observations)?;
    Ok(Scenario {
        spec: Some(spec.clone()),
        submaps,
        correspondences,
        prior: spec.prior()?,
        noise: spec.noise_params(),
        initial_extrinsic: spec.initial_offset.map(|o| spec.offset_extrinsic(&o)),
        ground_truth: Some(GroundTruth {
            extrinsic: spec.true_extrinsic,
            trajectories,
            keypoints,
            observation_keypoints,
            outliers: vec![false; n_corr],
            gating: None,
        }),
    })
}

fn random_twist(rng: &mut impl Rng, drift: &DriftSpec) -> Twist {
    let u: [f64; 3] = UnitSphere.sample(rng);
    let v: [f64; 3] = UnitSphere.sample(rng);
    Twist::new(Vector3::from(u) * drift.rotation, Vector3::from(v) * drift.translation)
}

/// Replaces the DVL-INS measurements with drifted copies of the true
/// trajectories. Ground truth, observations and correspondences are kept.
///
/// Global drift left-composes one rigid transform of fixed magnitude and
/// random direction per submap. Local drift accumulates a Gaussian random
/// walk along each trajectory, starting from the true first pose.
pub fn inject_drift(scenario: &Scenario, global: bool, local: bool) -> Result<Scenario> {
    let spec = scenario
        .spec
        .as_ref()
        .ok_or_else(|| Error::InsufficientData("drift injection needs the scenario spec".into()))?;
    let truth = scenario.truth()?;
    if !global && !local {
        return Ok(scenario.clone());
    }
    let mut global_rng = stage_rng(spec.seed, STAGE_GLOBAL_DRIFT);
    let mut local_rng = stage_rng(spec.seed, STAGE_LOCAL_DRIFT);
    let rot_noise = Normal::new(0.0, spec.local_drift.rotation).map_err(|e| Error::InfeasibleSpec(e.to_string()))?;
    let trans_noise =
        Normal::new(0.0, spec.local_drift.translation).map_err(|e| Error::InfeasibleSpec(e.to_string()))?;
    let mut step_cov = Matrix6::zeros();
    for i in 0..3 {
        step_cov[(i, i)] = spec.local_drift.rotation.powi(2);
        step_cov[(i + 3, i + 3)] = spec.local_drift.translation.powi(2);
    }
    let mut global_cov = Matrix6::zeros();
    for i in 0..3 {
        global_cov[(i, i)] = spec.global_drift.rotation.powi(2) / 3.0;
        global_cov[(i + 3, i + 3)] = spec.global_drift.translation.powi(2) / 3.0;
    }
    let floor = floor_covariance();

    let mut measured = Vec::with_capacity(truth.trajectories.len());
    for traj in &truth.trajectories {
        let g = if global {
            se3_exp(&random_twist(&mut global_rng, &spec.global_drift))
        } else {
            Pose::identity()
        };
        let poses = traj.poses();
        let mut out = Vec::with_capacity(poses.len());
        let mut walked = poses[0].pose;
        let mut local_cov = Matrix6::<f64>::zeros();
        for (k, p) in poses.iter().enumerate() {
            if k > 0 && local {
                let delta = poses[k - 1].pose.inverse() * p.pose;
                let w = Vector6::from_fn(|i, _| {
                    if i < 3 {
                        rot_noise.sample(&mut local_rng)
                    } else {
                        trans_noise.sample(&mut local_rng)
                    }
                });
                walked = walked * delta * se3_exp(&Twist::from_vector(&w));
                let ad = delta.inverse().adjoint();
                local_cov = ad * local_cov * ad.transpose() + step_cov;
            } else if !local {
                walked = p.pose;
            }
            let mut cov = floor + local_cov;
            if global {
                let ad = p.pose.inverse().adjoint();
                cov += ad * global_cov * ad.transpose();
            }
            let cov = (cov + cov.transpose()) * 0.5;
            out.push(TimedPose::new(p.t, (g * walked).renormalized(), cov));
        }
        measured.push(Trajectory::new(traj.id(), out)?);
    }

    let observations = scenario.submaps.iter().map(|s| s.observations().to_vec()).collect();
    let mut out = scenario.clone();
    out.submaps = build_submaps(measured, observations)?;
    Ok(out)
}

/// Squared Mahalanobis distance of a correspondence's world disparity under
/// the prior extrinsic and measured poses.
pub fn gate_statistic(scenario: &Scenario, corr: &Correspondence) -> Result<f64> {
    let sa = &scenario.submaps[corr.a.submap];
    let sb = &scenario.submaps[corr.b.submap];
    let (oa, ob) = corr.observations(&scenario.submaps);
    let ta = sa.vehicle_pose(corr.a.index);
    let tb = sb.vehicle_pose(corr.b.index);
    let id = Pose::identity();
    let (va, vb) = (StateId::vehicle(0), StateId::vehicle(1));
    let eval = reprojection(
        &ReprojectionLeg {
            state: Some(va),
            pose: &ta,
            offset: &id,
            obs: oa,
        },
        &ReprojectionLeg {
            state: Some(vb),
            pose: &tb,
            offset: &id,
            obs: ob,
        },
        &scenario.prior.mean,
        Some(StateId::EXTRINSIC),
    )?;
    let (g1, g2) = eval.point_maps.expect("reprojection factors carry point maps");
    let mut s = g1 * oa.covariance * g1.transpose() + g2 * ob.covariance * g2.transpose();
    let terms = [
        (StateId::EXTRINSIC, scenario.prior.covariance()),
        (va, sa.trajectory().covariance_at(oa.t)?),
        (vb, sb.trajectory().covariance_at(ob.t)?),
    ];
    for (state, cov) in terms {
        let f = &eval.jacobians[&state];
        let f = nalgebra::Matrix3x6::from_iterator(f.iter().copied());
        s += f * cov * f.transpose();
    }
    let e = Vector3::from_iterator(eval.residual.iter().copied());
    let chol = ((s + s.transpose()) * 0.5)
        .cholesky()
        .ok_or(Error::SingularWeight("gate covariance"))?;
    Ok(e.dot(&chol.solve(&e)))
}

/// Chi-square threshold with three degrees of freedom at `probability`.
pub fn gate_threshold(probability: f64) -> f64 {
    ChiSquared::new(3.0)
        .expect("three degrees of freedom")
        .inverse_cdf(probability)
}

/// Adds laser-point noise, rematches a fraction of correspondences to wrong
/// keypoints, then drops every pair failing the chi-square gate.
pub fn corrupt_correspondences(scenario: &Scenario, noise_sigma: f64, outlier_fraction: f64) -> Result<Scenario> {
    if !(0.0..0.5).contains(&outlier_fraction) || !(noise_sigma >= 0.0) {
        return Err(Error::InfeasibleSpec(format!(
            "noise sigma {noise_sigma} / outlier fraction {outlier_fraction} out of range"
        )));
    }
    if noise_sigma == 0.0 && outlier_fraction == 0.0 {
        return Ok(scenario.clone());
    }
    let seed = scenario.spec.as_ref().map(|s| s.seed).unwrap_or(0);
    let mut out = scenario.clone();

    if noise_sigma > 0.0 {
        let mut rng = stage_rng(seed, STAGE_POINT_NOISE);
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::InfeasibleSpec(e.to_string()))?;
        let cov = Matrix3::identity() * noise_sigma * noise_sigma;
        for submap in &mut out.submaps {
            for k in 0..submap.observations().len() {
                let o = submap.observations()[k];
                let n = Vector3::from_fn(|_, _| normal.sample(&mut rng));
                submap.set_observation(k, KeypointObservation::new(o.t, o.point_laser + n, cov));
            }
        }
    }

    let mut labels = scenario
        .ground_truth
        .as_ref()
        .map(|g| g.outliers.clone())
        .unwrap_or_else(|| vec![false; scenario.correspondences.len()]);
    if outlier_fraction > 0.0 {
        let mut rng = stage_rng(seed, STAGE_OUTLIERS);
        let n_out = (outlier_fraction * out.correspondences.len() as f64).round() as usize;
        let mut picks: Vec<usize> = (0..out.correspondences.len()).collect();
        picks.shuffle(&mut rng);
        let truth = out.ground_truth.as_ref();
        for &c in picks.iter().take(n_out) {
            let corr = out.correspondences[c];
            let n_b = out.submaps[corr.b.submap].observations().len();
            if n_b < 2 {
                continue;
            }
            let mut index = rng.random_range(0..n_b - 1);
            if index >= corr.b.index {
                index += 1;
            }
            let wrong = match truth {
                Some(t) => {
                    let kps = &t.observation_keypoints;
                    kps[corr.b.submap][index] != kps[corr.a.submap][corr.a.index]
                }
                None => true,
            };
            out.correspondences[c].b.index = index;
            labels[c] = wrong;
        }
    }

    let threshold = gate_threshold(GATE_PROBABILITY);
    let mut stats = GatingStats::default();
    let mut kept = Vec::with_capacity(out.correspondences.len());
    let mut kept_labels = Vec::with_capacity(out.correspondences.len());
    for (corr, &outlier) in out.correspondences.iter().zip(&labels) {
        let pass = gate_statistic(&out, corr)? <= threshold;
        if outlier {
            stats.outliers_before += 1;
            stats.outliers_dropped += usize::from(!pass);
        } else {
            stats.inliers_before += 1;
            stats.inliers_dropped += usize::from(!pass);
        }
        if pass {
            kept.push(*corr);
            kept_labels.push(outlier);
        }
    }
    out.correspondences = kept;
    if let Some(t) = out.ground_truth.as_mut() {
        t.outliers = kept_labels;
        t.gating = Some(stats);
    }
    Ok(out)
}

/// `generate`, then drift and corruption as configured in the spec.
pub fn synthesize(spec: &ScenarioSpec) -> Result<Scenario> {
    let clean = generate(spec)?;
    let global = !spec.global_drift.is_zero();
    let local = !spec.local_drift.is_zero();
    let drifted = if global || local {
        inject_drift(&clean, global, local)?
    } else {
        clean
    };
    corrupt_correspondences(&drifted, spec.point_noise_sigma, spec.outlier_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::reprojection_fixed;

    fn excited(seed: u64) -> ScenarioSpec {
        ScenarioSpec::new(
            seed,
            6,
            20,
            Motion::Excited {
                amplitude: 10f64.to_radians(),
            },
        )
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&excited(3)).unwrap();
        let b = generate(&excited(3)).unwrap();
        assert_eq!(a, b);
        let c = generate(&excited(4)).unwrap();
        assert_ne!(a.correspondences, c.correspondences);
    }

    #[test]
    fn clean_residuals_vanish_at_truth() {
        let s = generate(&excited(5)).unwrap();
        let truth = s.ground_truth.as_ref().unwrap();
        assert!(!s.correspondences.is_empty());
        for c in &s.correspondences {
            let (oa, ob) = c.observations(&s.submaps);
            let ta = s.submaps[c.a.submap].vehicle_pose(c.a.index);
            let tb = s.submaps[c.b.submap].vehicle_pose(c.b.index);
            let e = reprojection_fixed(oa, ob, &ta, &tb, &truth.extrinsic).unwrap();
            assert!(e.residual.amax() < 1e-10, "{}", e.residual.amax());
        }
        for (i, sub) in s.submaps.iter().enumerate() {
            for (k, p) in sub.world_keypoints(&truth.extrinsic).iter().enumerate() {
                let id = truth.observation_keypoints[i][k];
                assert!((p - truth.keypoints[id]).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn pairs_get_requested_correspondences() {
        let s = generate(&excited(6)).unwrap();
        let counts = s.pair_counts();
        assert_eq!(counts.len(), 15);
        assert!(counts.values().all(|c| *c >= 2 && *c <= 20));
    }

    #[test]
    fn planar_motion_is_level() {
        let s = generate(&ScenarioSpec::new(1, 4, 10, Motion::Planar)).unwrap();
        for traj in s.dvlins_measurements() {
            for p in traj.poses() {
                let c = p.pose.rotation.matrix();
                assert!((c[(2, 2)] - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn no_drift_keeps_measurements() {
        let s = generate(&excited(8)).unwrap();
        let d = inject_drift(&s, false, false).unwrap();
        for (a, b) in s.submaps.iter().zip(&d.submaps) {
            for (pa, pb) in a.trajectory().poses().iter().zip(b.trajectory().poses()) {
                assert_eq!(pa.pose, pb.pose);
            }
        }
    }

    #[test]
    fn global_drift_is_rigid() {
        let mut spec = excited(9);
        spec.global_drift = DriftSpec {
            rotation: 0.5f64.to_radians(),
            translation: 0.05,
        };
        let s = generate(&spec).unwrap();
        let d = inject_drift(&s, true, false).unwrap();
        for (a, b) in s.submaps.iter().zip(&d.submaps) {
            let (pa, pb) = (a.trajectory().poses(), b.trajectory().poses());
            let shift = pb[0].pose * pa[0].pose.inverse();
            let g = shift.log().unwrap();
            assert!((g.phi.norm() - 0.5f64.to_radians()).abs() < 1e-12);
            for k in 1..pa.len() {
                let ra = pa[k - 1].pose.inverse() * pa[k].pose;
                let rb = pb[k - 1].pose.inverse() * pb[k].pose;
                assert!((ra.to_homogeneous() - rb.to_homogeneous()).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn clean_corruption_is_identity() {
        let s = generate(&excited(10)).unwrap();
        assert_eq!(corrupt_correspondences(&s, 0.0, 0.0).unwrap(), s);
    }

    #[test]
    fn gate_threshold_value() {
        assert!((gate_threshold(0.999) - 16.266).abs() < 1e-3);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = excited(1);
        spec.n_submaps = 1;
        assert!(matches!(generate(&spec), Err(Error::InfeasibleSpec(_))));
        let mut spec = excited(1);
        spec.outlier_fraction = 0.5;
        assert!(matches!(generate(&spec), Err(Error::InfeasibleSpec(_))));
    }
}
