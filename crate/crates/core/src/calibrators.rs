//! The three batch estimators and the update report.
//!
//! * Algorithm 1 trusts the navigation completely: only the extrinsic moves.
//! * Algorithm 2 gives each submap one rigid central pose with a prior at the
//!   DVL-INS value.
//! * Algorithm 3 estimates a pose and generalized velocity at every DVL-INS
//!   and keypoint time, tied together by WNOA and relative-pose errors.

use std::fmt;

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{
    extrinsic_prior, pose_prior_factor, relative_pose_error, relpose_covariance, reprojection, reprojection_fixed,
    velocity_continuity, wnoa_error, FactorEvaluation, FactorKind, MotionStates, NoiseParams, ReprojectionLeg, StateId,
    StateValue,
};
use crate::lie::{Pose, Rotation};
use crate::scene::{ExtrinsicPrior, Submap, TimedPose, Trajectory};
use crate::solver::{
    assemble, marginal_information, observability_from_information, observability_report, solve, whitened_jacobian,
    ObservabilityReport, SolveOptions, SolveReport, StateVector,
};
use crate::synth::Scenario;

/// Below these counts a warning is emitted; calibration still runs.
pub const MIN_SUBMAPS: usize = 6;
pub const MIN_CORRESPONDENCES_PER_PAIR: usize = 20;

/// Alg. 3 states closer than this in time are merged.
pub const MERGE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "1")]
    FixedNavigation,
    #[serde(rename = "2")]
    RigidSubmaps,
    #[serde(rename = "3")]
    MotionPrior,
}

impl Algorithm {
    pub fn number(&self) -> u8 {
        match self {
            Algorithm::FixedNavigation => 1,
            Algorithm::RigidSubmaps => 2,
            Algorithm::MotionPrior => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Algorithm::FixedNavigation),
            2 => Some(Algorithm::RigidSubmaps),
            3 => Some(Algorithm::MotionPrior),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationResult {
    pub algorithm: Algorithm,
    pub extrinsic: Pose,
    /// `log(C_prior^T C*)`, rad.
    pub delta_phi: Vector3<f64>,
    /// `r* - r_prior`, body frame, m.
    pub delta_r: Vector3<f64>,
    pub solve_report: SolveReport,
    /// Submaps re-registered through the posterior states (Alg. 2 and 3).
    pub posterior_submaps: Option<Vec<Submap>>,
    pub warnings: Vec<String>,
}

impl CalibrationResult {
    /// Recomputes the update from `extrinsic` and compares with the stored one.
    pub fn update_consistency(&self, prior: &ExtrinsicPrior) -> Result<f64> {
        let (phi, r) = extrinsic_update(&self.extrinsic, prior)?;
        Ok((phi - self.delta_phi).amax().max((r - self.delta_r).amax()))
    }
}

pub fn extrinsic_update(extrinsic: &Pose, prior: &ExtrinsicPrior) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let phi = (prior.mean.rotation.transpose() * extrinsic.rotation).log()?;
    Ok((phi, extrinsic.translation - prior.mean.translation))
}

fn data_warnings(scenario: &Scenario) -> Vec<String> {
    let mut w = Vec::new();
    if scenario.submaps.len() < MIN_SUBMAPS {
        w.push(format!(
            "only {} submaps; at least {MIN_SUBMAPS} are recommended",
            scenario.submaps.len()
        ));
    }
    for ((a, b), n) in scenario.pair_counts() {
        if n < MIN_CORRESPONDENCES_PER_PAIR {
            w.push(format!(
                "submaps {a} and {b} share {n} correspondences; at least {MIN_CORRESPONDENCES_PER_PAIR} are recommended"
            ));
        }
    }
    for msg in &w {
        log::warn!("{msg}");
    }
    w
}

fn check_inputs(scenario: &Scenario, min_submaps: usize) -> Result<()> {
    if scenario.correspondences.is_empty() {
        return Err(Error::InsufficientData("no correspondences".into()));
    }
    if scenario.submaps.len() < min_submaps {
        return Err(Error::InsufficientData(format!(
            "{} submaps, need at least {min_submaps}",
            scenario.submaps.len()
        )));
    }
    for c in &scenario.correspondences {
        for r in [c.a, c.b] {
            let ok = scenario
                .submaps
                .get(r.submap)
                .is_some_and(|s| r.index < s.observations().len());
            if !ok {
                return Err(Error::InsufficientData(format!(
                    "correspondence refers to missing observation {}/{}",
                    r.submap, r.index
                )));
            }
        }
    }
    Ok(())
}

fn finish(
    algorithm: Algorithm,
    scenario: &Scenario,
    states: &StateVector,
    mut report: SolveReport,
    observability: ObservabilityReport,
    posterior_submaps: Option<Vec<Submap>>,
    mut warnings: Vec<String>,
) -> Result<CalibrationResult> {
    let extrinsic = *states.pose(StateId::EXTRINSIC)?;
    let (delta_phi, delta_r) = extrinsic_update(&extrinsic, &scenario.prior)?;
    report.singular_values = observability.singular_values;
    report.unobservable_directions = observability.unobservable_directions;
    if !report.converged {
        let msg = format!(
            "solver stopped after {} iterations without converging",
            report.iterations
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    for d in &report.unobservable_directions {
        let msg = describe_direction(d.state, &d.direction, &extrinsic, d.ratio);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(CalibrationResult {
        algorithm,
        extrinsic,
        delta_phi,
        delta_r,
        solve_report: report,
        posterior_submaps,
        warnings,
    })
}

/// Unit body-frame translation direction of an extrinsic perturbation.
///
/// Under `T = T_bar exp(-d^)` a small `d = (phi, rho)` moves the laser origin
/// by `-C_bar rho` in the body frame.
pub fn body_translation_direction(direction: &[f64; 6], extrinsic: &Pose) -> Vector3<f64> {
    let rho = Vector3::new(direction[3], direction[4], direction[5]);
    let v = extrinsic.rotation.matrix() * rho;
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

fn describe_direction(state: StateId, direction: &[f64; 6], extrinsic: &Pose, ratio: f64) -> String {
    if state != StateId::EXTRINSIC {
        return format!(
            "unobservable direction (sigma ratio {ratio:.2e}) dominated by state {:?} {}",
            state.kind, state.index
        );
    }
    let rot = Vector3::new(direction[0], direction[1], direction[2]).norm();
    let trans = Vector3::new(direction[3], direction[4], direction[5]).norm();
    if trans >= rot {
        let b = body_translation_direction(direction, extrinsic);
        let (axis, align) = (0..3)
            .map(|i| (i + 1, b[i].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("three axes");
        format!(
            "unobservable direction (sigma ratio {ratio:.2e}): extrinsic translation along body axis {axis} (alignment {align:.4})"
        )
    } else {
        format!("unobservable direction (sigma ratio {ratio:.2e}): extrinsic rotation")
    }
}

fn extrinsic_observability(
    factors: &[FactorEvaluation],
    states: &StateVector,
    threshold: f64,
) -> Result<ObservabilityReport> {
    let data: Vec<FactorEvaluation> = factors.iter().filter(|f| !f.is_regularizer()).cloned().collect();
    if states.len() == 1 {
        let j = whitened_jacobian(&data, &[StateId::EXTRINSIC])?;
        return Ok(observability_report(&j, &[StateId::EXTRINSIC], threshold));
    }
    let normal = assemble(&data, states)?;
    let target = states.block_index(StateId::EXTRINSIC)?;
    let info = marginal_information(&normal.matrix, &[target])?;
    Ok(observability_from_information(&info, &[StateId::EXTRINSIC], threshold))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CalibrationOptions {
    pub solve: SolveOptions,
}

// ---- Algorithm 1 ----------------------------------------------------------

fn alg1_factors(scenario: &Scenario, states: &StateVector) -> Result<Vec<FactorEvaluation>> {
    let ext = states.pose(StateId::EXTRINSIC)?;
    let mut out = Vec::with_capacity(scenario.correspondences.len() + 1);
    for c in &scenario.correspondences {
        let (oa, ob) = c.observations(&scenario.submaps);
        let ta = scenario.submaps[c.a.submap].vehicle_pose(c.a.index);
        let tb = scenario.submaps[c.b.submap].vehicle_pose(c.b.index);
        out.push(reprojection_fixed(oa, ob, &ta, &tb, ext)?);
    }
    out.push(extrinsic_prior(ext, &scenario.prior)?);
    Ok(out)
}

pub fn calibrate_alg1(scenario: &Scenario, options: &CalibrationOptions) -> Result<CalibrationResult> {
    check_inputs(scenario, 1)?;
    let warnings = data_warnings(scenario);
    let initial = StateVector::new(vec![(
        StateId::EXTRINSIC,
        StateValue::Pose(scenario.initial_extrinsic()),
    )])?;
    let problem = |s: &StateVector| alg1_factors(scenario, s);
    let (states, report) = solve(problem, initial, &options.solve)?;
    let obs = extrinsic_observability(
        &alg1_factors(scenario, &states)?,
        &states,
        options.solve.observability_threshold,
    )?;
    finish(
        Algorithm::FixedNavigation,
        scenario,
        &states,
        report,
        obs,
        None,
        warnings,
    )
}

// ---- Algorithm 2 ----------------------------------------------------------

fn alg2_factors(scenario: &Scenario, states: &StateVector) -> Result<Vec<FactorEvaluation>> {
    let ext = states.pose(StateId::EXTRINSIC)?;
    let submap_cov = scenario.noise.submap_prior_covariance();
    let mut out = Vec::with_capacity(scenario.correspondences.len() + scenario.submaps.len() + 1);
    for c in &scenario.correspondences {
        let (sa, sb) = (&scenario.submaps[c.a.submap], &scenario.submaps[c.b.submap]);
        let (ia, ib) = (StateId::submap(sa.id()), StateId::submap(sb.id()));
        out.push(reprojection(
            &ReprojectionLeg {
                state: Some(ia),
                pose: states.pose(ia)?,
                offset: &sa.offsets()[c.a.index],
                obs: &sa.observations()[c.a.index],
            },
            &ReprojectionLeg {
                state: Some(ib),
                pose: states.pose(ib)?,
                offset: &sb.offsets()[c.b.index],
                obs: &sb.observations()[c.b.index],
            },
            ext,
            Some(StateId::EXTRINSIC),
        )?);
    }
    for s in &scenario.submaps {
        let id = StateId::submap(s.id());
        out.push(pose_prior_factor(
            FactorKind::PosePrior,
            id,
            states.pose(id)?,
            s.central(),
            &submap_cov,
        )?);
    }
    out.push(extrinsic_prior(ext, &scenario.prior)?);
    Ok(out)
}

fn check_submap_ids(scenario: &Scenario) -> Result<()> {
    for (k, s) in scenario.submaps.iter().enumerate() {
        if s.id() != k {
            return Err(Error::InsufficientData(format!(
                "submap at position {k} has id {}; ids must match positions",
                s.id()
            )));
        }
    }
    Ok(())
}

pub fn calibrate_alg2(scenario: &Scenario, options: &CalibrationOptions) -> Result<CalibrationResult> {
    check_inputs(scenario, 2)?;
    check_submap_ids(scenario)?;
    scenario.noise.validate()?;
    let warnings = data_warnings(scenario);
    let mut order: Vec<&Submap> = scenario.submaps.iter().collect();
    order.sort_by(|a, b| a.central_time().total_cmp(&b.central_time()).then(a.id().cmp(&b.id())));
    let mut entries = vec![(StateId::EXTRINSIC, StateValue::Pose(scenario.initial_extrinsic()))];
    entries.extend(
        order
            .iter()
            .map(|s| (StateId::submap(s.id()), StateValue::Pose(*s.central()))),
    );
    let initial = StateVector::new(entries)?;
    let problem = |s: &StateVector| alg2_factors(scenario, s);
    let (states, report) = solve(problem, initial, &options.solve)?;
    let obs = extrinsic_observability(
        &alg2_factors(scenario, &states)?,
        &states,
        options.solve.observability_threshold,
    )?;
    let posterior = scenario
        .submaps
        .iter()
        .map(|s| states.pose(StateId::submap(s.id())).map(|p| s.with_central(*p)))
        .collect::<Result<Vec<_>>>()?;
    finish(
        Algorithm::RigidSubmaps,
        scenario,
        &states,
        report,
        obs,
        Some(posterior),
        warnings,
    )
}

// ---- Algorithm 3 ----------------------------------------------------------

/// One submap's state chain.
#[derive(Clone, Debug)]
pub struct Chain {
    pub submap: usize,
    /// Merged, strictly increasing state times.
    pub times: Vec<f64>,
    /// Global index of the first state of this chain.
    pub first_state: usize,
    /// Chain position of each DVL-INS sample.
    pub pose_states: Vec<usize>,
    /// Chain position of each observation.
    pub observation_states: Vec<usize>,
    /// Measured pose at every chain time.
    pub measured: Vec<Pose>,
}

impl Chain {
    pub fn state(&self, position: usize) -> StateId {
        StateId::vehicle(self.first_state + position)
    }

    pub fn velocity(&self, position: usize) -> StateId {
        StateId::velocity(self.first_state + position)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Time-sorted union of DVL-INS and keypoint times; times within
/// [`MERGE_TOLERANCE`] share one state.
pub fn merge_times(pose_times: &[f64], observation_times: &[f64]) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let mut all: Vec<(f64, u8, usize)> = pose_times
        .iter()
        .enumerate()
        .map(|(k, t)| (*t, 0u8, k))
        .chain(observation_times.iter().enumerate().map(|(k, t)| (*t, 1u8, k)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut times: Vec<f64> = Vec::new();
    let mut pose_pos = vec![0; pose_times.len()];
    let mut obs_pos = vec![0; observation_times.len()];
    for (t, kind, k) in all {
        let merge = times.last().is_some_and(|last| (t - last).abs() < MERGE_TOLERANCE);
        if !merge {
            times.push(t);
        }
        let pos = times.len() - 1;
        if kind == 0 {
            pose_pos[k] = pos;
        } else {
            obs_pos[k] = pos;
        }
    }
    (times, pose_pos, obs_pos)
}

pub fn build_chains(submaps: &[Submap]) -> Result<Vec<Chain>> {
    let mut chains = Vec::with_capacity(submaps.len());
    let mut next = 0;
    for s in submaps {
        let traj = s.trajectory();
        let pose_times: Vec<f64> = traj.poses().iter().map(|p| p.t).collect();
        let obs_times: Vec<f64> = s.observations().iter().map(|o| o.t).collect();
        let (times, pose_states, observation_states) = merge_times(&pose_times, &obs_times);
        let mut measured: Vec<Pose> = times.iter().map(|t| traj.pose_at(*t)).collect::<Result<_>>()?;
        for (k, &pos) in pose_states.iter().enumerate() {
            measured[pos] = traj.poses()[k].pose;
        }
        let n = times.len();
        chains.push(Chain {
            submap: s.id(),
            times,
            first_state: next,
            pose_states,
            observation_states,
            measured,
        });
        next += n;
    }
    Ok(chains)
}

/// Forward-difference velocities from the measured poses; the last copies
/// its predecessor.
pub fn initial_velocities(chain: &Chain) -> Result<Vec<Vector6<f64>>> {
    let n = chain.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n.saturating_sub(1) {
        let dt = chain.times[k + 1] - chain.times[k];
        let xi = (chain.measured[k].inverse() * chain.measured[k + 1]).log()?;
        out.push(xi.to_vector() / dt);
    }
    let last = out.last().copied().unwrap_or_else(Vector6::zeros);
    out.push(last);
    Ok(out)
}

fn alg3_factors(scenario: &Scenario, chains: &[Chain], states: &StateVector) -> Result<Vec<FactorEvaluation>> {
    let ext = states.pose(StateId::EXTRINSIC)?;
    let noise: &NoiseParams = &scenario.noise;
    let psd = noise.wnoa_psd_matrix();
    let identity = Pose::identity();
    let mut out = Vec::new();
    for c in &scenario.correspondences {
        let (ca, cb) = (&chains[c.a.submap], &chains[c.b.submap]);
        let ia = ca.state(ca.observation_states[c.a.index]);
        let ib = cb.state(cb.observation_states[c.b.index]);
        let (oa, ob) = c.observations(&scenario.submaps);
        out.push(reprojection(
            &ReprojectionLeg {
                state: Some(ia),
                pose: states.pose(ia)?,
                offset: &identity,
                obs: oa,
            },
            &ReprojectionLeg {
                state: Some(ib),
                pose: states.pose(ib)?,
                offset: &identity,
                obs: ob,
            },
            ext,
            Some(StateId::EXTRINSIC),
        )?);
    }
    for chain in chains {
        let traj = scenario.submaps[chain.submap].trajectory();
        for (k, &pos) in chain.pose_states.iter().enumerate() {
            let id = chain.state(pos);
            let m: &TimedPose = &traj.poses()[k];
            out.push(pose_prior_factor(
                FactorKind::PosePrior,
                id,
                states.pose(id)?,
                &m.pose,
                &m.covariance,
            )?);
        }
        for k in 1..chain.len() {
            let dt = chain.times[k] - chain.times[k - 1];
            let poses = MotionStates {
                prev: chain.state(k - 1),
                curr: chain.state(k),
            };
            let vels = MotionStates {
                prev: chain.velocity(k - 1),
                curr: chain.velocity(k),
            };
            let prev = states.pose(poses.prev)?;
            let curr = states.pose(poses.curr)?;
            let w_prev = states.velocity(vels.prev)?;
            out.push(wnoa_error(&poses, vels.prev, prev, curr, w_prev, dt, &psd)?);
            out.push(velocity_continuity(
                &vels,
                w_prev,
                states.velocity(vels.curr)?,
                dt,
                &psd,
            )?);
            out.push(relative_pose_error(
                &poses,
                prev,
                curr,
                &chain.measured[k - 1],
                &chain.measured[k],
                &relpose_covariance(dt, &noise.relpose_sigma),
            )?);
        }
    }
    out.push(extrinsic_prior(ext, &scenario.prior)?);
    Ok(out)
}

fn alg3_posterior(scenario: &Scenario, chains: &[Chain], states: &StateVector) -> Result<Vec<Submap>> {
    scenario
        .submaps
        .iter()
        .zip(chains)
        .map(|(s, chain)| {
            let traj = s.trajectory();
            let poses = (0..chain.len())
                .map(|k| {
                    let cov = traj.covariance_at(chain.times[k])?;
                    Ok(TimedPose::new(chain.times[k], *states.pose(chain.state(k))?, cov))
                })
                .collect::<Result<Vec<_>>>()?;
            let central = chain.pose_states[s.central_index()];
            Submap::with_central_index(Trajectory::new(s.id(), poses)?, central, s.observations().to_vec())
        })
        .collect()
}

pub fn calibrate_alg3(scenario: &Scenario, options: &CalibrationOptions) -> Result<CalibrationResult> {
    check_inputs(scenario, 1)?;
    check_submap_ids(scenario)?;
    scenario.noise.validate()?;
    let warnings = data_warnings(scenario);
    let chains = build_chains(&scenario.submaps)?;
    let mut entries = vec![(StateId::EXTRINSIC, StateValue::Pose(scenario.initial_extrinsic()))];
    let mut velocities = Vec::new();
    for chain in &chains {
        for (k, w) in initial_velocities(chain)?.into_iter().enumerate() {
            entries.push((chain.state(k), StateValue::Pose(chain.measured[k])));
            velocities.push((chain.velocity(k), StateValue::Velocity(w)));
        }
    }
    entries.extend(velocities);
    let initial = StateVector::new(entries)?;
    log::info!("algorithm 3: {} state blocks", initial.len());
    let problem = |s: &StateVector| alg3_factors(scenario, &chains, s);
    let (states, report) = solve(problem, initial, &options.solve)?;
    let obs = extrinsic_observability(
        &alg3_factors(scenario, &chains, &states)?,
        &states,
        options.solve.observability_threshold,
    )?;
    let posterior = alg3_posterior(scenario, &chains, &states)?;
    finish(
        Algorithm::MotionPrior,
        scenario,
        &states,
        report,
        obs,
        Some(posterior),
        warnings,
    )
}

pub fn calibrate(algorithm: Algorithm, scenario: &Scenario, options: &CalibrationOptions) -> Result<CalibrationResult> {
    match algorithm {
        Algorithm::FixedNavigation => calibrate_alg1(scenario, options),
        Algorithm::RigidSubmaps => calibrate_alg2(scenario, options),
        Algorithm::MotionPrior => calibrate_alg3(scenario, options),
    }
}

// ---- Reporting ------------------------------------------------------------

/// Extrinsic update in degrees and centimeters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub algorithm: u8,
    pub delta_phi_norm_deg: f64,
    pub delta_phi_deg: [f64; 3],
    pub delta_r_cm: [f64; 3],
    pub iterations: usize,
    pub converged: bool,
    pub observability_warnings: Vec<String>,
}

pub fn report_update(result: &CalibrationResult, prior: &ExtrinsicPrior) -> Result<UpdateReport> {
    let (phi, r) = extrinsic_update(&result.extrinsic, prior)?;
    let warnings = result
        .solve_report
        .unobservable_directions
        .iter()
        .map(|d| describe_direction(d.state, &d.direction, &result.extrinsic, d.ratio))
        .collect();
    Ok(UpdateReport {
        algorithm: result.algorithm.number(),
        delta_phi_norm_deg: phi.norm().to_degrees(),
        delta_phi_deg: phi.map(f64::to_degrees).into(),
        delta_r_cm: (r * 100.0).into(),
        iterations: result.solve_report.iterations,
        converged: result.solve_report.converged,
        observability_warnings: warnings,
    })
}

impl fmt::Display for UpdateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "algorithm {}", self.algorithm)?;
        writeln!(f, "|dphi| = {:.2} deg", self.delta_phi_norm_deg)?;
        writeln!(
            f,
            "dr = ({:.2}, {:.2}, {:.2}) cm",
            self.delta_r_cm[0], self.delta_r_cm[1], self.delta_r_cm[2]
        )?;
        writeln!(
            f,
            "iterations = {} ({})",
            self.iterations,
            if self.converged { "converged" } else { "not converged" }
        )?;
        if self.observability_warnings.is_empty() {
            writeln!(f, "observability: all extrinsic directions observable")?;
        } else {
            for w in &self.observability_warnings {
                writeln!(f, "observability warning: {w}")?;
            }
        }
        Ok(())
    }
}

/// Angle (rad) and translation distance (m) between two extrinsics.
pub fn extrinsic_error(estimate: &Pose, truth: &Pose) -> (f64, f64) {
    let r: Rotation = truth.rotation.transpose() * estimate.rotation;
    (r.angle(), (estimate.translation - truth.translation).norm())
}
