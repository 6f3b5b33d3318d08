//! Dataset and result files: canonical JSON with sorted keys and every
//! float written at 17 significant digits, so write(read(x)) is bitwise
//! stable.

use std::io;
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::factors::NoiseParams;
use crate::lie::Pose;
use crate::scene::{
    Correspondence, ExtrinsicPrior, KeypointObservation, ObservationRef, Submap, TimedPose, Trajectory,
};
use crate::synth::{GatingStats, GroundTruth, Scenario, ScenarioSpec};

pub const SCHEMA_VERSION: &str = "lasercal-dataset/1";

/// Largest accepted `max |C^T C - I|` for a stored rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Pretty printer that writes floats in `{:.16e}` form.
struct CanonicalFormatter {
    inner: PrettyFormatter<'static>,
}

impl CanonicalFormatter {
    fn new() -> Self {
        CanonicalFormatter {
            inner: PrettyFormatter::with_indent(b"  "),
        }
    }
}

impl Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_array(writer)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object(writer)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object_value(writer)
    }
}

/// Canonical JSON text of any serializable value, newline terminated.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // Going through `Value` sorts object keys.
    let tree = serde_json::to_value(value)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CanonicalFormatter::new());
    tree.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

pub fn write_json_file<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, to_canonical_json(value)?)?;
    Ok(())
}

fn quoted_name(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

/// Parses `text` as `T`, reporting failures with the JSON path of the
/// offending field and the line and column of the error.
pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let json_path = e.path().to_string();
        let inner = e.inner();
        let msg = inner.to_string();
        // Paths of missing fields stop at the enclosing object.
        let field = match quoted_name(&msg).filter(|_| msg.starts_with("missing field")) {
            Some(name) if json_path == "." => name.to_string(),
            Some(name) => format!("{json_path}.{name}"),
            None => json_path,
        };
        Error::SchemaViolation {
            path: path.to_path_buf(),
            field,
            reason: msg,
        }
    })?;
    de.end().map_err(|e| Error::SchemaViolation {
        path: path.to_path_buf(),
        field: ".".into(),
        reason: e.to_string(),
    })?;
    Ok(value)
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse_json(&text, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimedPoseRecord {
    t: f64,
    pose: Pose,
    covariance: [[f64; 6]; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    id: usize,
    poses: Vec<TimedPoseRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationRecord {
    t: f64,
    /// Laser-frame point, m.
    point: [f64; 3],
    covariance: [[f64; 3]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmapRecord {
    trajectory: TrajectoryRecord,
    central_index: usize,
    observations: Vec<ObservationRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationRefRecord {
    submap: usize,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrespondenceRecord {
    a: ObservationRefRecord,
    b: ObservationRefRecord,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorRecord {
    mean: Pose,
    sigma_phi: f64,
    sigma_rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthRecord {
    extrinsic: Pose,
    trajectories: Vec<TrajectoryRecord>,
    keypoints: Vec<[f64; 3]>,
    observation_keypoints: Vec<Vec<usize>>,
    outliers: Vec<bool>,
    gating: Option<GatingStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    schema_version: String,
    #[serde(default)]
    spec: Option<ScenarioSpec>,
    submaps: Vec<SubmapRecord>,
    correspondences: Vec<CorrespondenceRecord>,
    prior: PriorRecord,
    noise: NoiseParams,
    #[serde(default)]
    initial_extrinsic: Option<Pose>,
    #[serde(default)]
    ground_truth: Option<GroundTruthRecord>,
}

fn rows6(m: &Matrix6<f64>) -> [[f64; 6]; 6] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn rows3(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn trajectory_record(t: &Trajectory) -> TrajectoryRecord {
    TrajectoryRecord {
        id: t.id(),
        poses: t
            .poses()
            .iter()
            .map(|p| TimedPoseRecord {
                t: p.t,
                pose: p.pose,
                covariance: rows6(&p.covariance),
            })
            .collect(),
    }
}

fn obs_ref(r: ObservationRef) -> ObservationRefRecord {
    ObservationRefRecord {
        submap: r.submap,
        index: r.index,
    }
}

fn to_record(s: &Scenario) -> DatasetRecord {
    DatasetRecord {
        schema_version: SCHEMA_VERSION.into(),
        spec: s.spec.clone(),
        submaps: s
            .submaps
            .iter()
            .map(|m| SubmapRecord {
                trajectory: trajectory_record(m.trajectory()),
                central_index: m.central_index(),
                observations: m
                    .observations()
                    .iter()
                    .map(|o| ObservationRecord {
                        t: o.t,
                        point: o.point_laser.into(),
                        covariance: rows3(&o.covariance),
                    })
                    .collect(),
            })
            .collect(),
        correspondences: s
            .correspondences
            .iter()
            .map(|c| CorrespondenceRecord {
                a: obs_ref(c.a),
                b: obs_ref(c.b),
            })
            .collect(),
        prior: PriorRecord {
            mean: s.prior.mean,
            sigma_phi: s.prior.sigma_phi,
            sigma_rho: s.prior.sigma_rho,
        },
        noise: s.noise,
        initial_extrinsic: s.initial_extrinsic,
        ground_truth: s.ground_truth.as_ref().map(|g| GroundTruthRecord {
            extrinsic: g.extrinsic,
            trajectories: g.trajectories.iter().map(trajectory_record).collect(),
            keypoints: g.keypoints.iter().map(|k| (*k).into()).collect(),
            observation_keypoints: g.observation_keypoints.clone(),
            outliers: g.outliers.clone(),
            gating: g.gating.clone(),
        }),
    }
}

fn trajectory_poses<'a>(prefix: &str, t: &'a TrajectoryRecord, out: &mut Vec<(String, &'a Pose)>) {
    for (k, p) in t.poses.iter().enumerate() {
        out.push((format!("{prefix}.poses[{k}].pose"), &p.pose));
    }
}

/// Every pose in the record with its JSON path.
fn poses_of(r: &DatasetRecord) -> Vec<(String, &Pose)> {
    let mut out = Vec::new();
    for (i, s) in r.submaps.iter().enumerate() {
        trajectory_poses(&format!("submaps[{i}].trajectory"), &s.trajectory, &mut out);
    }
    out.push(("prior.mean".into(), &r.prior.mean));
    if let Some(p) = &r.initial_extrinsic {
        out.push(("initial_extrinsic".into(), p));
    }
    if let Some(spec) = &r.spec {
        out.push(("spec.true_extrinsic".into(), &spec.true_extrinsic));
    }
    if let Some(g) = &r.ground_truth {
        out.push(("ground_truth.extrinsic".into(), &g.extrinsic));
        for (i, t) in g.trajectories.iter().enumerate() {
            trajectory_poses(&format!("ground_truth.trajectories[{i}]"), t, &mut out);
        }
    }
    out
}

fn violation(path: &Path, field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::SchemaViolation {
        path: path.to_path_buf(),
        field: field.into(),
        reason: reason.into(),
    }
}

fn trajectory_from(t: &TrajectoryRecord) -> Result<Trajectory> {
    Trajectory::new(
        t.id,
        t.poses
            .iter()
            .map(|p| TimedPose::new(p.t, p.pose, Matrix6::from_fn(|i, j| p.covariance[i][j])))
            .collect(),
    )
}

fn from_record(r: DatasetRecord, path: &Path) -> Result<Scenario> {
    if r.schema_version != SCHEMA_VERSION {
        return Err(violation(
            path,
            "schema_version",
            format!("expected \"{SCHEMA_VERSION}\", found \"{}\"", r.schema_version),
        ));
    }
    for (field, pose) in poses_of(&r) {
        let deviation = pose.rotation.orthonormality_deviation();
        let det = pose.rotation.matrix().determinant();
        if !(deviation <= ROTATION_TOLERANCE) || det < 0.0 {
            return Err(Error::NonOrthonormalRotation {
                path: path.to_path_buf(),
                field: format!("{field}.rotation"),
                deviation: if det < 0.0 {
                    deviation.max((det - 1.0).abs())
                } else {
                    deviation
                },
            });
        }
    }
    let mut submaps = Vec::with_capacity(r.submaps.len());
    for (i, s) in r.submaps.iter().enumerate() {
        let observations = s
            .observations
            .iter()
            .map(|o| KeypointObservation::new(o.t, Vector3::from(o.point), Matrix3::from_fn(|a, b| o.covariance[a][b])))
            .collect();
        let traj = trajectory_from(&s.trajectory)?;
        if s.central_index >= traj.poses().len() {
            return Err(violation(
                path,
                format!("submaps[{i}].central_index"),
                format!(
                    "{} is outside the {} trajectory poses",
                    s.central_index,
                    traj.poses().len()
                ),
            ));
        }
        submaps.push(Submap::with_central_index(traj, s.central_index, observations)?);
    }
    let correspondences = r
        .correspondences
        .iter()
        .enumerate()
        .map(|(i, c)| {
            for (side, o) in [("a", c.a), ("b", c.b)] {
                let ok = submaps.get(o.submap).is_some_and(|s| o.index < s.observations().len());
                if !ok {
                    return Err(violation(
                        path,
                        format!("correspondences[{i}].{side}"),
                        format!("no observation {} in submap {}", o.index, o.submap),
                    ));
                }
            }
            Correspondence::new(
                ObservationRef {
                    submap: c.a.submap,
                    index: c.a.index,
                },
                ObservationRef {
                    submap: c.b.submap,
                    index: c.b.index,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let prior = ExtrinsicPrior::new(r.prior.mean, r.prior.sigma_phi, r.prior.sigma_rho)?;
    r.noise.validate()?;
    let ground_truth = match r.ground_truth {
        None => None,
        Some(g) => Some(GroundTruth {
            extrinsic: g.extrinsic,
            trajectories: g.trajectories.iter().map(trajectory_from).collect::<Result<_>>()?,
            keypoints: g.keypoints.iter().map(|k| Vector3::from(*k)).collect(),
            observation_keypoints: g.observation_keypoints,
            outliers: g.outliers,
            gating: g.gating,
        }),
    };
    Ok(Scenario {
        spec: r.spec,
        submaps,
        correspondences,
        prior,
        noise: r.noise,
        initial_extrinsic: r.initial_extrinsic,
        ground_truth,
    })
}

pub fn dataset_to_json(scenario: &Scenario) -> Result<String> {
    to_canonical_json(&to_record(scenario))
}

/// Parses and validates dataset text; `path` only labels diagnostics.
pub fn dataset_from_json(text: &str, path: &Path) -> Result<Scenario> {
    from_record(parse_json(text, path)?, path)
}

pub fn write_dataset(scenario: &Scenario, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_json(scenario)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    dataset_from_json(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Rotation;
    use crate::synth::{synthesize, Motion};

    fn small() -> Scenario {
        let mut spec = ScenarioSpec::new(3, 3, 5, Motion::Excited { amplitude: 0.1 });
        spec.point_noise_sigma = 0.01;
        spec.outlier_fraction = 0.2;
        synthesize(&spec).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = small();
        let text = dataset_to_json(&s).unwrap();
        let back = dataset_from_json(&text, Path::new("mem")).unwrap();
        assert_eq!(back, s);
        assert_eq!(dataset_to_json(&back).unwrap(), text);
    }

    #[test]
    fn floats_use_seventeen_digits_and_keys_are_sorted() {
        let text = to_canonical_json(&serde_json::json!({"b": 0.1, "a": 1})).unwrap();
        assert_eq!(text, "{\n  \"a\": 1,\n  \"b\": 1.0000000000000001e-1\n}\n");
    }

    #[test]
    fn reflection_is_rejected() {
        let mut s = small();
        s.prior.mean.rotation = Rotation::from_matrix_unchecked(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)));
        let text = dataset_to_json(&s).unwrap();
        match dataset_from_json(&text, Path::new("mem")) {
            Err(Error::NonOrthonormalRotation { field, .. }) => assert_eq!(field, "prior.mean.rotation"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let s = small();
        let mut v: serde_json::Value = serde_json::from_str(&dataset_to_json(&s).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("noise");
        match dataset_from_json(&v.to_string(), Path::new("mem")) {
            Err(Error::SchemaViolation { field, reason, .. }) => {
                assert_eq!(field, "noise");
                assert!(reason.contains("line"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_rejected_with_path() {
        let s = small();
        let mut v: serde_json::Value = serde_json::from_str(&dataset_to_json(&s).unwrap()).unwrap();
        v["prior"]["extra"] = serde_json::json!(1);
        match dataset_from_json(&v.to_string(), Path::new("mem")) {
            Err(Error::SchemaViolation { field, .. }) => assert_eq!(field, "prior.extra"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_schema_violation() {
        let text = dataset_to_json(&small()).unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(
            dataset_from_json(cut, Path::new("mem")),
            Err(Error::SchemaViolation { .. })
        ));
    }

    #[test]
    fn dangling_correspondence_is_rejected() {
        let mut s = small();
        s.correspondences[0].a.index = 10_000;
        let text = dataset_to_json(&s).unwrap();
        match dataset_from_json(&text, Path::new("mem")) {
            Err(Error::SchemaViolation { field, .. }) => assert_eq!(field, "correspondences[0].a"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
