//! Error terms of the three calibration objectives.
//!
//! Every factor returns a [`FactorEvaluation`]: the residual `e`, its weight
//! (inverse covariance) and one Jacobian block per state it touches. Jacobians
//! are taken with respect to the perturbation `T = T_bar exp(-dxi^)` for poses
//! and `w = w_bar - dw` for generalized velocities, so that the Gauss-Newton
//! step `dxi* = -(F^T W F)^-1 F^T W e` is applied identically to every block.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{odot_point, se3_exp, se3_jacobian, se3_jacobian_inverse, se3_log, JacobianSide, Pose, Twist};
use crate::scene::{Correspondence, ExtrinsicPrior, KeypointObservation, Submap, TimedPose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Extrinsic,
    SubmapPose,
    VehiclePose,
    Velocity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId {
    pub kind: StateKind,
    pub index: usize,
}

impl StateId {
    pub const EXTRINSIC: StateId = StateId {
        kind: StateKind::Extrinsic,
        index: 0,
    };

    pub fn submap(index: usize) -> Self {
        StateId {
            kind: StateKind::SubmapPose,
            index,
        }
    }

    pub fn vehicle(index: usize) -> Self {
        StateId {
            kind: StateKind::VehiclePose,
            index,
        }
    }

    pub fn velocity(index: usize) -> Self {
        StateId {
            kind: StateKind::Velocity,
            index,
        }
    }
}

/// Value of one state block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StateValue {
    Pose(Pose),
    Velocity(Vector6<f64>),
}

impl StateValue {
    /// Applies a block increment with the crate-wide sign convention:
    /// `T exp(-d^)` for poses, `w - d` for velocities.
    pub fn perturbed(&self, delta: &Vector6<f64>) -> StateValue {
        match self {
            StateValue::Pose(p) => StateValue::Pose(p.retract_minus(&Twist::from_vector(delta))),
            StateValue::Velocity(w) => StateValue::Velocity(w - delta),
        }
    }

    pub fn as_pose(&self) -> Option<&Pose> {
        match self {
            StateValue::Pose(p) => Some(p),
            StateValue::Velocity(_) => None,
        }
    }

    pub fn as_velocity(&self) -> Option<&Vector6<f64>> {
        match self {
            StateValue::Velocity(w) => Some(w),
            StateValue::Pose(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Reprojection,
    ExtrinsicPrior,
    PosePrior,
    Wnoa,
    VelocityContinuity,
    RelativePose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorEvaluation {
    pub kind: FactorKind,
    pub residual: DVector<f64>,
    pub weight: DMatrix<f64>,
    pub jacobians: BTreeMap<StateId, DMatrix<f64>>,
    /// `(G1, G2)` mapping laser-point noise into a reprojection residual.
    pub point_maps: Option<(Matrix3<f64>, Matrix3<f64>)>,
}

impl FactorEvaluation {
    fn new(kind: FactorKind, residual: DVector<f64>, weight: DMatrix<f64>) -> Self {
        FactorEvaluation {
            kind,
            residual,
            weight,
            jacobians: BTreeMap::new(),
            point_maps: None,
        }
    }

    fn add_block(&mut self, id: StateId, block: DMatrix<f64>) {
        debug_assert_eq!(block.nrows(), self.residual.len());
        self.jacobians.entry(id).and_modify(|b| *b += &block).or_insert(block);
    }

    pub fn dim(&self) -> usize {
        self.residual.len()
    }

    /// `1/2 e^T W e`
    pub fn cost(&self) -> f64 {
        0.5 * self.residual.dot(&(&self.weight * &self.residual))
    }

    /// The Tikhonov term on the extrinsic; excluded from observability
    /// diagnostics since it is there to mask rank deficiency.
    pub fn is_regularizer(&self) -> bool {
        self.kind == FactorKind::ExtrinsicPrior
    }
}

/// User-tunable noise for the motion-prior and submap-prior terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    /// Power spectral density of the white-noise acceleration, `(phi, rho)`
    /// diagonal, per second.
    pub wnoa_psd: [f64; 6],
    /// Relative-pose standard deviation per square-root second, `(phi, rho)`.
    pub relpose_sigma: [f64; 6],
    /// Global submap pose prior, rad.
    pub submap_sigma_phi: f64,
    /// Global submap pose prior, m, per body axis.
    pub submap_sigma_rho: [f64; 3],
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            wnoa_psd: [1e-2, 1e-2, 1e-2, 1e-2, 1e-2, 1e-2],
            relpose_sigma: [1e-3, 1e-3, 1e-3, 2e-3, 2e-3, 2e-3],
            submap_sigma_phi: 1f64.to_radians(),
            submap_sigma_rho: [0.25, 0.25, 0.25],
        }
    }
}

impl NoiseParams {
    pub fn wnoa_psd_matrix(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from_row_slice(&self.wnoa_psd))
    }

    /// `Sigma_i = blkdiag(sigma_phi^2 I, diag(sigma_rho)^2)`.
    pub fn submap_prior_covariance(&self) -> Matrix6<f64> {
        let mut d = Vector6::zeros();
        for i in 0..3 {
            d[i] = self.submap_sigma_phi * self.submap_sigma_phi;
            d[i + 3] = self.submap_sigma_rho[i] * self.submap_sigma_rho[i];
        }
        Matrix6::from_diagonal(&d)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.wnoa_psd.iter().all(|v| *v > 0.0)
            && self.relpose_sigma.iter().all(|v| *v > 0.0)
            && self.submap_sigma_phi > 0.0
            && self.submap_sigma_rho.iter().all(|v| *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::SingularWeight("noise parameters must be strictly positive"))
        }
    }
}

/// WNOA pose-error covariance over an interval `dt`. First-order
/// discretization, `Q_k = dt * psd`.
pub fn wnoa_covariance(dt: f64, psd: &Matrix6<f64>) -> Matrix6<f64> {
    psd * dt
}

/// Relative-pose covariance over an interval `dt`, `R_k = dt * diag(sigma)^2`.
pub fn relpose_covariance(dt: f64, sigma: &[f64; 6]) -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::from_iterator(sigma.iter().map(|s| s * s * dt)))
}

fn weight_from_covariance<const N: usize>(
    cov: &nalgebra::SMatrix<f64, N, N>,
    what: &'static str,
) -> Result<DMatrix<f64>> {
    let sym = (cov + cov.transpose()) * 0.5;
    let chol = sym.cholesky().ok_or(Error::SingularWeight(what))?;
    let inv = chol.inverse();
    let inv = (inv + inv.transpose()) * 0.5;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularWeight(what));
    }
    Ok(DMatrix::from_iterator(N, N, inv.iter().copied()))
}

fn dyn3x6(m: &nalgebra::Matrix3x6<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(3, 6, m.iter().copied())
}

fn dyn6(m: &Matrix6<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(6, 6, m.iter().copied())
}

fn dvec3(v: &Vector3<f64>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

fn dvec6(v: &Vector6<f64>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

/// `M_j = G1 R1 G1^T + G2 R2 G2^T`
pub fn propagate_point_covariance(
    g1: &Matrix3<f64>,
    g2: &Matrix3<f64>,
    r1: &Matrix3<f64>,
    r2: &Matrix3<f64>,
) -> Matrix3<f64> {
    let m = g1 * r1 * g1.transpose() + g2 * r2 * g2.transpose();
    (m + m.transpose()) * 0.5
}

/// One side of a reprojection error: the keypoint registered through
/// `pose * offset * extrinsic`. `state` names the design variable behind
/// `pose`, or `None` when the pose is held fixed.
#[derive(Clone, Copy, Debug)]
pub struct ReprojectionLeg<'a> {
    pub state: Option<StateId>,
    pub pose: &'a Pose,
    pub offset: &'a Pose,
    pub obs: &'a KeypointObservation,
}

/// General reprojection error `e = H(T1 T~1 T u1 - T2 T~2 T u2)`.
///
/// The extrinsic block is emitted when `extrinsic_state` is `Some`.
pub fn reprojection(
    leg1: &ReprojectionLeg<'_>,
    leg2: &ReprojectionLeg<'_>,
    extrinsic: &Pose,
    extrinsic_state: Option<StateId>,
) -> Result<FactorEvaluation> {
    let c_ext = extrinsic.rotation.matrix();
    let c1 = leg1.pose.rotation.matrix();
    let c2 = leg2.pose.rotation.matrix();
    // points in the central (or vehicle) frame, T~ T u
    let x1 = leg1
        .offset
        .transform_point(&extrinsic.transform_point(&leg1.obs.point_laser));
    let x2 = leg2
        .offset
        .transform_point(&extrinsic.transform_point(&leg2.obs.point_laser));
    let residual = leg1.pose.transform_point(&x1) - leg2.pose.transform_point(&x2);

    let a1 = c1 * leg1.offset.rotation.matrix() * c_ext;
    let a2 = c2 * leg2.offset.rotation.matrix() * c_ext;
    let g1 = a1;
    let g2 = -a2;
    let m = propagate_point_covariance(&g1, &g2, &leg1.obs.covariance, &leg2.obs.covariance);

    let mut eval = FactorEvaluation::new(
        FactorKind::Reprojection,
        dvec3(&residual),
        weight_from_covariance(&m, "reprojection covariance M_j")?,
    );
    eval.point_maps = Some((g1, g2));
    if let Some(id) = extrinsic_state {
        let f = a2 * odot_point(&leg2.obs.point_laser) - a1 * odot_point(&leg1.obs.point_laser);
        eval.add_block(id, dyn3x6(&f));
    }
    if let Some(id) = leg1.state {
        eval.add_block(id, dyn3x6(&(-(c1 * odot_point(&x1)))));
    }
    if let Some(id) = leg2.state {
        eval.add_block(id, dyn3x6(&(c2 * odot_point(&x2))));
    }
    Ok(eval)
}

/// Reprojection error with both vehicle poses held fixed; only the
/// extrinsic block is returned.
pub fn reprojection_fixed(
    obs1: &KeypointObservation,
    obs2: &KeypointObservation,
    t1: &Pose,
    t2: &Pose,
    extrinsic: &Pose,
) -> Result<FactorEvaluation> {
    let id = Pose::identity();
    reprojection(
        &ReprojectionLeg {
            state: None,
            pose: t1,
            offset: &id,
            obs: obs1,
        },
        &ReprojectionLeg {
            state: None,
            pose: t2,
            offset: &id,
            obs: obs2,
        },
        extrinsic,
        Some(StateId::EXTRINSIC),
    )
}

/// Reprojection error through two rigid submaps, with blocks on the
/// extrinsic and both central submap poses.
pub fn reprojection_submap(
    corr: &Correspondence,
    sub1: &Submap,
    sub2: &Submap,
    extrinsic: &Pose,
) -> Result<FactorEvaluation> {
    debug_assert_eq!(corr.a.submap, sub1.id());
    debug_assert_eq!(corr.b.submap, sub2.id());
    reprojection(
        &ReprojectionLeg {
            state: Some(StateId::submap(sub1.id())),
            pose: sub1.central(),
            offset: &sub1.offsets()[corr.a.index],
            obs: &sub1.observations()[corr.a.index],
        },
        &ReprojectionLeg {
            state: Some(StateId::submap(sub2.id())),
            pose: sub2.central(),
            offset: &sub2.offsets()[corr.b.index],
            obs: &sub2.observations()[corr.b.index],
        },
        extrinsic,
        Some(StateId::EXTRINSIC),
    )
}

/// Left-invariant prior `log(T^-1 T_check)` with `T_check = T_tilde exp(-eta^)`,
/// `eta ~ N(0, Sigma)`. Jacobian `J_l(e)^-1`, covariance `P = G Sigma G^T`
/// with `G = -J_r(e)^-1`.
pub fn pose_prior_factor(
    kind: FactorKind,
    id: StateId,
    state: &Pose,
    mean: &Pose,
    covariance: &Matrix6<f64>,
) -> Result<FactorEvaluation> {
    let e = se3_log(&(state.inverse() * *mean))?;
    let g = -se3_jacobian_inverse(&e, JacobianSide::Right);
    let p = g * covariance * g.transpose();
    let mut eval = FactorEvaluation::new(
        kind,
        dvec6(&e.to_vector()),
        weight_from_covariance(&p, "prior covariance P")?,
    );
    eval.add_block(id, dyn6(&se3_jacobian_inverse(&e, JacobianSide::Left)));
    Ok(eval)
}

pub fn extrinsic_prior(extrinsic: &Pose, prior: &ExtrinsicPrior) -> Result<FactorEvaluation> {
    pose_prior_factor(
        FactorKind::ExtrinsicPrior,
        StateId::EXTRINSIC,
        extrinsic,
        &prior.mean,
        &prior.covariance(),
    )
}

pub fn pose_prior(id: StateId, pose: &Pose, measured: &TimedPose) -> Result<FactorEvaluation> {
    pose_prior_factor(FactorKind::PosePrior, id, pose, &measured.pose, &measured.covariance)
}

/// Error twist with its Jacobians on the previous pose, current pose and
/// increment.
type ChainedError = (Twist, Matrix6<f64>, Matrix6<f64>, Matrix6<f64>);

/// Shared machinery of WNOA and relative-pose errors,
/// `e = log(T_k^-1 T_k-1 D)` for a fixed or velocity-driven increment `D`.
fn chained_error(prev: &Pose, curr: &Pose, increment: &Pose) -> Result<ChainedError> {
    let e = se3_log(&(curr.inverse() * *prev * *increment))?;
    let jr_inv = se3_jacobian_inverse(&e, JacobianSide::Right);
    let d_curr = se3_jacobian_inverse(&e, JacobianSide::Left);
    let d_prev = -(jr_inv * increment.inverse().adjoint());
    Ok((e, d_curr, d_prev, jr_inv))
}

pub struct MotionStates {
    pub prev: StateId,
    pub curr: StateId,
}

/// `e_w = log(T_k^-1 T_k-1 exp(dt w_k-1^))`, weighted by `Q_k^-1`.
pub fn wnoa_error(
    states: &MotionStates,
    velocity_state: StateId,
    prev: &Pose,
    curr: &Pose,
    velocity: &Vector6<f64>,
    dt: f64,
    psd: &Matrix6<f64>,
) -> Result<FactorEvaluation> {
    if !(dt > 0.0) {
        return Err(Error::NonpositiveDt(dt));
    }
    let step = Twist::from_vector(&(velocity * dt));
    let (e, d_curr, d_prev, jr_inv) = chained_error(prev, curr, &se3_exp(&step))?;
    let d_vel = -(jr_inv * se3_jacobian(&step, JacobianSide::Right)) * dt;
    let mut eval = FactorEvaluation::new(
        FactorKind::Wnoa,
        dvec6(&e.to_vector()),
        weight_from_covariance(&wnoa_covariance(dt, psd), "WNOA covariance Q_k")?,
    );
    eval.add_block(states.curr, dyn6(&d_curr));
    eval.add_block(states.prev, dyn6(&d_prev));
    eval.add_block(velocity_state, dyn6(&d_vel));
    Ok(eval)
}

/// Velocity half of the WNOA prior, `w_k - w_k-1`, weighted by `(dt psd)^-1`.
/// Without it every velocity appears in a single pose error and absorbs it.
pub fn velocity_continuity(
    states: &MotionStates,
    prev: &Vector6<f64>,
    curr: &Vector6<f64>,
    dt: f64,
    psd: &Matrix6<f64>,
) -> Result<FactorEvaluation> {
    if !(dt > 0.0) {
        return Err(Error::NonpositiveDt(dt));
    }
    let mut eval = FactorEvaluation::new(
        FactorKind::VelocityContinuity,
        dvec6(&(curr - prev)),
        weight_from_covariance(&wnoa_covariance(dt, psd), "WNOA covariance Q_k")?,
    );
    eval.add_block(states.curr, -DMatrix::identity(6, 6));
    eval.add_block(states.prev, DMatrix::identity(6, 6));
    Ok(eval)
}

/// `e_r = log(T_k^-1 T_k-1 T_check_k-1^-1 T_check_k)`, weighted by `R_k^-1`.
pub fn relative_pose_error(
    states: &MotionStates,
    prev: &Pose,
    curr: &Pose,
    measured_prev: &Pose,
    measured_curr: &Pose,
    covariance: &Matrix6<f64>,
) -> Result<FactorEvaluation> {
    let increment = measured_prev.inverse() * *measured_curr;
    let (e, d_curr, d_prev, _) = chained_error(prev, curr, &increment)?;
    let mut eval = FactorEvaluation::new(
        FactorKind::RelativePose,
        dvec6(&e.to_vector()),
        weight_from_covariance(covariance, "relative pose covariance R_k")?,
    );
    eval.add_block(states.curr, dyn6(&d_curr));
    eval.add_block(states.prev, dyn6(&d_prev));
    Ok(eval)
}

/// Central finite-difference Jacobian of `residual` with respect to one state
/// block, perturbed with [`StateValue::perturbed`].
pub fn numeric_jacobian<F>(residual: F, at: &StateValue, step: f64) -> DMatrix<f64>
where
    F: Fn(&StateValue) -> DVector<f64>,
{
    let n = residual(at).len();
    let mut jac = DMatrix::zeros(n, 6);
    for i in 0..6 {
        let mut d = Vector6::zeros();
        d[i] = step;
        let plus = residual(&at.perturbed(&d));
        let minus = residual(&at.perturbed(&-d));
        jac.set_column(i, &((plus - minus) / (2.0 * step)));
    }
    jac
}

/// `|A - B|_F / max(|B|_F, 1)`
pub fn relative_difference(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(1.0)
}
