//! Trajectories, keypoint observations and rigid submaps.

use nalgebra::{Matrix3, Matrix6, Vector3};

use crate::error::{Error, Result};
use crate::lie::{interpolate, Pose};

/// Isotropic laser point standard deviation (m) assumed when a dataset
/// carries no per-point covariance.
pub const DEFAULT_KEYPOINT_SIGMA: f64 = 0.01;

pub fn default_keypoint_covariance() -> Matrix3<f64> {
    Matrix3::identity() * (DEFAULT_KEYPOINT_SIGMA * DEFAULT_KEYPOINT_SIGMA)
}

/// A navigation pose `T_ab_k` at time `t` with its left-invariant covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Pose,
    pub covariance: Matrix6<f64>,
}

impl TimedPose {
    pub fn new(t: f64, pose: Pose, covariance: Matrix6<f64>) -> Self {
        TimedPose { t, pose, covariance }
    }
}

/// A contiguous, time-ordered section of the vehicle trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    id: usize,
    poses: Vec<TimedPose>,
}

impl Trajectory {
    pub fn new(id: usize, poses: Vec<TimedPose>) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::InvalidTrajectory(format!(
                "trajectory {id} has {} poses, need at least 2",
                poses.len()
            )));
        }
        for (k, w) in poses.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(Error::InvalidTrajectory(format!(
                    "trajectory {id}: timestamps not strictly increasing at pose {}",
                    k + 1
                )));
            }
        }
        for (k, p) in poses.iter().enumerate() {
            let c = &p.covariance;
            if (c - c.transpose()).amax() > 1e-12 {
                return Err(Error::InvalidTrajectory(format!(
                    "trajectory {id}: covariance of pose {k} is not symmetric"
                )));
            }
        }
        Ok(Trajectory { id, poses })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn poses(&self) -> &[TimedPose] {
        &self.poses
    }

    pub fn start(&self) -> f64 {
        self.poses[0].t
    }

    pub fn end(&self) -> f64 {
        self.poses[self.poses.len() - 1].t
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start() && t <= self.end()
    }

    /// Index `k` of the segment `[t_k, t_k+1]` holding `t`, or the exact sample.
    fn locate(&self, t: f64) -> Result<Located> {
        if !self.contains(t) {
            return Err(Error::ObservationOutOfSpan {
                t,
                start: self.start(),
                end: self.end(),
            });
        }
        let k = self.poses.partition_point(|p| p.t <= t);
        // k >= 1 because t >= start
        if self.poses[k - 1].t == t {
            Ok(Located::Sample(k - 1))
        } else {
            Ok(Located::Between(k - 1))
        }
    }

    /// Geodesic interpolation of the trajectory; never extrapolates.
    pub fn pose_at(&self, t: f64) -> Result<Pose> {
        match self.locate(t)? {
            Located::Sample(k) => Ok(self.poses[k].pose),
            Located::Between(k) => {
                let (a, b) = (&self.poses[k], &self.poses[k + 1]);
                interpolate(&a.pose, &b.pose, a.t, b.t, t)
            }
        }
    }

    /// Covariance at `t`, linearly blended between the bracketing samples.
    pub fn covariance_at(&self, t: f64) -> Result<Matrix6<f64>> {
        match self.locate(t)? {
            Located::Sample(k) => Ok(self.poses[k].covariance),
            Located::Between(k) => {
                let (a, b) = (&self.poses[k], &self.poses[k + 1]);
                let alpha = (t - a.t) / (b.t - a.t);
                Ok(a.covariance * (1.0 - alpha) + b.covariance * alpha)
            }
        }
    }

    pub fn positions(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.poses.iter().map(|p| p.pose.translation)
    }
}

enum Located {
    Sample(usize),
    Between(usize),
}

/// One keypoint as measured in the laser frame, `r^{qs}_l`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointObservation {
    pub t: f64,
    pub point_laser: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

impl KeypointObservation {
    pub fn new(t: f64, point_laser: Vector3<f64>, covariance: Matrix3<f64>) -> Self {
        KeypointObservation {
            t,
            point_laser,
            covariance,
        }
    }

    pub fn with_default_covariance(t: f64, point_laser: Vector3<f64>) -> Self {
        Self::new(t, point_laser, default_keypoint_covariance())
    }
}

/// Reference to `submaps[submap].observations[index]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObservationRef {
    pub submap: usize,
    pub index: usize,
}

/// A matched keypoint pair between two different submaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Correspondence {
    pub a: ObservationRef,
    pub b: ObservationRef,
}

impl Correspondence {
    pub fn new(a: ObservationRef, b: ObservationRef) -> Result<Self> {
        if a.submap == b.submap {
            return Err(Error::InsufficientData(format!(
                "correspondence links submap {} to itself",
                a.submap
            )));
        }
        Ok(Correspondence { a, b })
    }

    pub fn observations<'a>(&self, submaps: &'a [Submap]) -> (&'a KeypointObservation, &'a KeypointObservation) {
        (
            &submaps[self.a.submap].observations()[self.a.index],
            &submaps[self.b.submap].observations()[self.b.index],
        )
    }
}

/// Prior on the laser-to-INS extrinsic, `T_tilde_0` with
/// `Sigma_0 = blkdiag(sigma_phi I, sigma_rho I)^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtrinsicPrior {
    pub mean: Pose,
    pub sigma_phi: f64,
    pub sigma_rho: f64,
}

impl ExtrinsicPrior {
    pub fn new(mean: Pose, sigma_phi: f64, sigma_rho: f64) -> Result<Self> {
        if !(sigma_phi > 0.0 && sigma_rho > 0.0) {
            return Err(Error::InsufficientData(format!(
                "extrinsic prior sigmas must be positive (got {sigma_phi}, {sigma_rho})"
            )));
        }
        Ok(ExtrinsicPrior {
            mean,
            sigma_phi,
            sigma_rho,
        })
    }

    pub fn covariance(&self) -> Matrix6<f64> {
        let mut d = Matrix6::zeros();
        for i in 0..3 {
            d[(i, i)] = self.sigma_phi * self.sigma_phi;
            d[(i + 3, i + 3)] = self.sigma_rho * self.sigma_rho;
        }
        d
    }
}

/// `r^{pw}_a = T_vehicle T_extrinsic [r; 1]`.
pub fn register_point(vehicle: &Pose, extrinsic: &Pose, point_laser: &Vector3<f64>) -> Vector3<f64> {
    vehicle.transform_point(&extrinsic.transform_point(point_laser))
}

/// A rigid point-cloud submap: one central pose plus fixed offsets to the
/// vehicle pose at each keypoint time.
#[derive(Clone, Debug, PartialEq)]
pub struct Submap {
    id: usize,
    trajectory: Trajectory,
    central_index: usize,
    central: Pose,
    offsets: Vec<Pose>,
    observations: Vec<KeypointObservation>,
}

impl Submap {
    /// Builds a submap whose central pose is `trajectory.poses()[central_index]`.
    pub fn with_central_index(
        trajectory: Trajectory,
        central_index: usize,
        observations: Vec<KeypointObservation>,
    ) -> Result<Self> {
        let central = trajectory
            .poses()
            .get(central_index)
            .ok_or_else(|| {
                Error::InvalidTrajectory(format!(
                    "central index {central_index} outside trajectory {}",
                    trajectory.id()
                ))
            })?
            .pose;
        let central_inv = central.inverse();
        let offsets = observations
            .iter()
            .map(|o| trajectory.pose_at(o.t).map(|p| central_inv * p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Submap {
            id: trajectory.id(),
            trajectory,
            central_index,
            central,
            offsets,
            observations,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn central_index(&self) -> usize {
        self.central_index
    }

    pub fn central(&self) -> &Pose {
        &self.central
    }

    pub fn central_time(&self) -> f64 {
        self.trajectory.poses()[self.central_index].t
    }

    pub fn offsets(&self) -> &[Pose] {
        &self.offsets
    }

    pub fn observations(&self) -> &[KeypointObservation] {
        &self.observations
    }

    /// Vehicle pose when observation `k` was taken, `central * offset_k`.
    pub fn vehicle_pose(&self, k: usize) -> Pose {
        self.central * self.offsets[k]
    }

    pub fn world_keypoints(&self, extrinsic: &Pose) -> Vec<Vector3<f64>> {
        (0..self.observations.len())
            .map(|k| register_point(&self.vehicle_pose(k), extrinsic, &self.observations[k].point_laser))
            .collect()
    }

    /// Moves the whole submap rigidly so its central pose becomes `central`.
    /// The trajectory is carried along so the offsets stay valid.
    pub fn with_central(&self, central: Pose) -> Submap {
        let shift = central * self.central.inverse();
        let poses = self
            .trajectory
            .poses()
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let pose = if k == self.central_index {
                    central
                } else {
                    shift * p.pose
                };
                TimedPose::new(p.t, pose, p.covariance)
            })
            .collect();
        Submap {
            id: self.id,
            trajectory: Trajectory {
                id: self.trajectory.id,
                poses,
            },
            central_index: self.central_index,
            central,
            offsets: self.offsets.clone(),
            observations: self.observations.clone(),
        }
    }

    /// Replaces the laser-frame measurements, keeping times and offsets.
    pub(crate) fn set_observation(&mut self, k: usize, obs: KeypointObservation) {
        debug_assert_eq!(obs.t, self.observations[k].t);
        self.observations[k] = obs;
    }
}

/// Crossing point of each trajectory against all the others.
///
/// For every pair of trajectories the pair of poses with the smallest
/// position distance is found; a trajectory's crossing point is the centroid
/// of its closest-approach positions. With a single trajectory the centroid
/// of its positions is used.
pub fn crossing_points(trajectories: &[Trajectory]) -> Vec<Vector3<f64>> {
    let n = trajectories.len();
    let mut sums = vec![Vector3::zeros(); n];
    let mut counts = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut best = (f64::INFINITY, 0, 0);
            for (a, pa) in trajectories[i].positions().enumerate() {
                for (b, pb) in trajectories[j].positions().enumerate() {
                    let d = (pa - pb).norm_squared();
                    if d < best.0 {
                        best = (d, a, b);
                    }
                }
            }
            sums[i] += trajectories[i].poses()[best.1].pose.translation;
            sums[j] += trajectories[j].poses()[best.2].pose.translation;
            counts[i] += 1;
            counts[j] += 1;
        }
    }
    (0..n)
        .map(|i| {
            if counts[i] > 0 {
                sums[i] / counts[i] as f64
            } else {
                let traj = &trajectories[i];
                traj.positions().sum::<Vector3<f64>>() / traj.poses().len() as f64
            }
        })
        .collect()
}

/// Index of the pose nearest `point`; ties go to the earliest timestamp.
pub fn nearest_pose_index(trajectory: &Trajectory, point: &Vector3<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, p) in trajectory.positions().enumerate() {
        let d = (p - point).norm_squared();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Builds one submap: the central pose is the trajectory pose nearest the
/// crossing point, offsets come from interpolating at each keypoint time.
pub fn build_submap(
    trajectory: Trajectory,
    crossing: &Vector3<f64>,
    observations: Vec<KeypointObservation>,
) -> Result<Submap> {
    let central_index = nearest_pose_index(&trajectory, crossing);
    Submap::with_central_index(trajectory, central_index, observations)
}

/// Builds all submaps with the crossing-point central-pose rule.
pub fn build_submaps(
    trajectories: Vec<Trajectory>,
    observations: Vec<Vec<KeypointObservation>>,
) -> Result<Vec<Submap>> {
    let crossings = crossing_points(&trajectories);
    trajectories
        .into_iter()
        .zip(observations)
        .zip(crossings.iter())
        .map(|((traj, obs), c)| build_submap(traj, c, obs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{se3_exp, Rotation, Twist};

    fn straight_line(id: usize, origin: Vector3<f64>, dir: Vector3<f64>, n: usize) -> Trajectory {
        let heading = dir.y.atan2(dir.x);
        let poses = (0..n)
            .map(|k| {
                let p = Pose::new(Rotation::about_z(heading), origin + dir * k as f64);
                TimedPose::new(k as f64, p, Matrix6::identity() * 1e-4)
            })
            .collect();
        Trajectory::new(id, poses).unwrap()
    }

    #[test]
    fn register_identity() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(register_point(&Pose::identity(), &Pose::identity(), &p), p);
    }

    #[test]
    fn register_through_enu_to_ned() {
        let c = Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0);
        let ext = Pose::new(Rotation::from_matrix_unchecked(c), Vector3::zeros());
        let out = register_point(&Pose::identity(), &ext, &Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(out, Vector3::new(2.0, 1.0, -3.0));
    }

    #[test]
    fn trajectory_rejects_bad_timestamps() {
        let p = TimedPose::new(0.0, Pose::identity(), Matrix6::zeros());
        assert!(Trajectory::new(0, vec![p]).is_err());
        assert!(Trajectory::new(0, vec![p, p]).is_err());
        let q = TimedPose::new(1.0, Pose::identity(), Matrix6::zeros());
        assert!(Trajectory::new(0, vec![q, p]).is_err());
        assert!(Trajectory::new(0, vec![p, q]).is_ok());
    }

    #[test]
    fn pose_at_refuses_extrapolation() {
        let traj = straight_line(0, Vector3::zeros(), Vector3::x(), 4);
        assert!(matches!(traj.pose_at(-0.1), Err(Error::ObservationOutOfSpan { .. })));
        assert!(matches!(traj.pose_at(3.1), Err(Error::ObservationOutOfSpan { .. })));
        assert_eq!(traj.pose_at(3.0).unwrap(), traj.poses()[3].pose);
        let mid = traj.pose_at(1.5).unwrap();
        assert!((mid.translation - Vector3::new(1.5, 0.0, 0.0)).amax() < 1e-14);
    }

    #[test]
    fn constant_trajectory_has_identity_offsets() {
        let pose = se3_exp(&Twist::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(4.0, 5.0, 6.0)));
        let traj = Trajectory::new(
            0,
            vec![
                TimedPose::new(0.0, pose, Matrix6::zeros()),
                TimedPose::new(1.0, pose, Matrix6::zeros()),
            ],
        )
        .unwrap();
        let obs = vec![
            KeypointObservation::with_default_covariance(0.25, Vector3::new(1.0, 0.0, -5.0)),
            KeypointObservation::with_default_covariance(0.75, Vector3::new(0.0, 1.0, -5.0)),
        ];
        let sub = build_submap(traj, &Vector3::zeros(), obs).unwrap();
        assert_eq!(*sub.central(), pose);
        for off in sub.offsets() {
            assert!((off.to_homogeneous() - nalgebra::Matrix4::identity()).amax() < 1e-12);
        }
    }

    #[test]
    fn central_pose_is_nearest_crossing() {
        let a = straight_line(0, Vector3::new(-5.0, 0.3, 0.0), Vector3::x(), 11);
        let b = straight_line(1, Vector3::new(0.0, -5.0, 0.0), Vector3::y(), 11);
        let crossings = crossing_points(&[a.clone(), b.clone()]);
        // brute force: the crossing of the two lines is near (0, 0.3)
        let sub_a = build_submap(a.clone(), &crossings[0], vec![]).unwrap();
        let mut best = (f64::INFINITY, 0);
        for (k, p) in a.positions().enumerate() {
            let d = (p - crossings[0]).norm();
            if d < best.0 {
                best = (d, k);
            }
        }
        assert_eq!(sub_a.central_index(), best.1);
        assert_eq!(sub_a.central_index(), 5);
        let sub_b = build_submap(b, &crossings[1], vec![]).unwrap();
        assert_eq!(sub_b.central_index(), 5);
    }

    #[test]
    fn offsets_recompose_interpolated_poses() {
        let mut poses = Vec::new();
        for k in 0..6 {
            let xi = Twist::new(
                Vector3::new(0.05 * k as f64, -0.02 * k as f64, 0.3 + 0.1 * k as f64),
                Vector3::new(k as f64, 0.5 * k as f64, 0.1),
            );
            poses.push(TimedPose::new(k as f64 * 0.5, se3_exp(&xi), Matrix6::zeros()));
        }
        let traj = Trajectory::new(3, poses).unwrap();
        let obs: Vec<_> = [0.1, 0.7, 1.3, 2.5]
            .iter()
            .map(|&t| KeypointObservation::with_default_covariance(t, Vector3::new(t, -1.0, -4.0)))
            .collect();
        let sub = build_submap(traj.clone(), &Vector3::new(1.0, 0.0, 0.0), obs).unwrap();
        let ext = se3_exp(&Twist::new(Vector3::new(0.01, 0.02, 1.5), Vector3::new(0.3, 0.0, 0.2)));
        let world = sub.world_keypoints(&ext);
        for (k, o) in sub.observations().iter().enumerate() {
            let direct = traj.pose_at(o.t).unwrap();
            let recomposed = sub.vehicle_pose(k);
            assert!((direct.to_homogeneous() - recomposed.to_homogeneous()).amax() < 1e-12);
            let p = register_point(&direct, &ext, &o.point_laser);
            assert!((p - world[k]).amax() < 1e-12);
        }
        assert!(matches!(
            build_submap(
                traj,
                &Vector3::zeros(),
                vec![KeypointObservation::with_default_covariance(9.0, Vector3::zeros())]
            ),
            Err(Error::ObservationOutOfSpan { .. })
        ));
    }

    #[test]
    fn moving_central_pose_moves_everything_rigidly() {
        let traj = straight_line(0, Vector3::zeros(), Vector3::x(), 5);
        let obs = vec![KeypointObservation::with_default_covariance(
            1.5,
            Vector3::new(0.0, 0.0, -3.0),
        )];
        let sub = build_submap(traj, &Vector3::new(2.0, 0.0, 0.0), obs).unwrap();
        let g = se3_exp(&Twist::new(Vector3::new(0.0, 0.0, 0.1), Vector3::new(0.2, -0.1, 0.0)));
        let moved = sub.with_central(g * *sub.central());
        let before = sub.world_keypoints(&Pose::identity());
        let after = moved.world_keypoints(&Pose::identity());
        assert!((g.transform_point(&before[0]) - after[0]).amax() < 1e-12);
        let t = moved.trajectory().pose_at(1.5).unwrap();
        assert!((t.to_homogeneous() - moved.vehicle_pose(0).to_homogeneous()).amax() < 1e-12);
    }
}
