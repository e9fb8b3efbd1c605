//! On-disk formats: frames JSONL, world JSON, trajectory CSV and the map
//! export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix6, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::Detection;
use crate::geometry::{CameraIntrinsics, PixelBox, Pose, Twist};
use crate::map::DEFAULT_EXTENT;
use crate::pipeline::Frame;
use crate::semantics::{ConfusionMatrix, LabelDatabase, LandmarkStatus};
use crate::simulator::WorldGT;
use crate::supervision::EditLog;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("schema violation at {context}: {message}")]
    SchemaViolation { context: String, message: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    fn schema(context: impl Into<String>, message: impl ToString) -> Self {
        IoError::SchemaViolation { context: context.into(), message: message.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OdomWire {
    dx: [f64; 6],
    cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsWire {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    w: u32,
    h: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionWire {
    label: String,
    conf: f64,
    #[serde(rename = "box")]
    bbox: [i64; 4],
    point_cam: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extent: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameWire {
    frame: u64,
    t: f64,
    odom: OdomWire,
    intrinsics: IntrinsicsWire,
    #[serde(default)]
    detections: Vec<DetectionWire>,
}

impl From<&Frame> for FrameWire {
    fn from(f: &Frame) -> Self {
        let dx = f.odom.log_unchecked().to_vector();
        let k = &f.intrinsics;
        FrameWire {
            frame: f.frame,
            t: f.t,
            odom: OdomWire { dx: dx.into(), cov: f.odom_cov.transpose().iter().copied().collect() },
            intrinsics: IntrinsicsWire { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, w: k.width, h: k.height },
            detections: f
                .detections
                .iter()
                .map(|d| DetectionWire {
                    label: d.label.clone(),
                    conf: d.confidence,
                    bbox: d.pixel_box.rounded(),
                    point_cam: d.point_cam.into(),
                    extent: d.extent.map(Into::into),
                })
                .collect(),
        }
    }
}

impl FrameWire {
    fn into_frame(self) -> Result<Frame, String> {
        if self.odom.cov.len() != 36 {
            return Err(format!("odom.cov has {} entries, expected 36", self.odom.cov.len()));
        }
        let dx = Vector6::from(self.odom.dx);
        if !dx.iter().all(|x| x.is_finite()) {
            return Err("odom.dx must be finite".into());
        }
        let odom_cov = Matrix6::from_row_slice(&self.odom.cov);
        let i = &self.intrinsics;
        let intrinsics =
            CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy, i.w, i.h).map_err(|e| format!("intrinsics: {e}"))?;
        let mut detections = Vec::with_capacity(self.detections.len());
        for (n, d) in self.detections.into_iter().enumerate() {
            let [u0, v0, u1, v1] = d.bbox.map(|x| x as f64);
            let det = Detection {
                label: d.label,
                confidence: d.conf,
                pixel_box: PixelBox { u_min: u0, v_min: v0, u_max: u1, v_max: v1 },
                point_cam: Vector3::from(d.point_cam),
                extent: d.extent.map(Vector3::from),
            };
            det.validate().map_err(|e| format!("detections[{n}]: {e}"))?;
            detections.push(det);
        }
        Ok(Frame {
            frame: self.frame,
            t: self.t,
            odom: Pose::exp(&Twist::from_vector(&dx)),
            odom_cov,
            intrinsics,
            detections,
        })
    }
}

/// Default extent assumed for detections without one.
pub fn default_extent() -> Vector3<f64> {
    Vector3::repeat(DEFAULT_EXTENT)
}

pub fn frame_to_json(f: &Frame) -> String {
    serde_json::to_string(&FrameWire::from(f)).expect("frame serializes")
}

/// Parses one dataset line. Errors name the line and, when it can be
/// recovered, the frame id.
pub fn frame_from_json(line: &str, line_no: usize) -> Result<Frame, IoError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| IoError::schema(format!("line {line_no}"), e))?;
    let context = match value.get("frame").and_then(|v| v.as_u64()) {
        Some(id) => format!("line {line_no} (frame {id})"),
        None => format!("line {line_no}"),
    };
    let wire: FrameWire = serde_json::from_value(value).map_err(|e| IoError::schema(context.clone(), e))?;
    wire.into_frame().map_err(|m| IoError::schema(context, m))
}

pub fn read_frames_from<R: Read>(reader: R) -> Result<Vec<Frame>, IoError> {
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| IoError::schema(format!("line {}", i + 1), e))?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(frame_from_json(&line, i + 1)?);
    }
    Ok(frames)
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    read_frames_from(file)
}

pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in frames {
        writeln!(w, "{}", frame_to_json(f)).map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| IoError::schema(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| IoError::schema(path.display().to_string(), e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| IoError::io(path, e))
}

pub fn read_world(path: &Path) -> Result<WorldGT, IoError> {
    read_json(path)
}

pub fn write_world(path: &Path, world: &WorldGT) -> Result<(), IoError> {
    write_json(path, world)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl TrajectoryRecord {
    pub fn from_pose(t: f64, pose: &Pose) -> Self {
        Self { t, translation: pose.translation, rotation: pose.quaternion() }
    }

    pub fn pose(&self) -> Pose {
        Pose::from_quaternion(&self.rotation, self.translation)
    }
}

impl Serialize for TrajectoryRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TrajectoryRow::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for TrajectoryRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        TrajectoryRow::deserialize(d)?.try_into().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    t: f64,
    tx: f64,
    ty: f64,
    tz: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

impl From<&TrajectoryRecord> for TrajectoryRow {
    fn from(r: &TrajectoryRecord) -> Self {
        let q = r.rotation.quaternion();
        TrajectoryRow {
            t: r.t,
            tx: r.translation.x,
            ty: r.translation.y,
            tz: r.translation.z,
            qx: q.i,
            qy: q.j,
            qz: q.k,
            qw: q.w,
        }
    }
}

impl TryFrom<TrajectoryRow> for TrajectoryRecord {
    type Error = String;

    fn try_from(r: TrajectoryRow) -> Result<Self, String> {
        let q = nalgebra::Quaternion::new(r.qw, r.qx, r.qy, r.qz);
        if ((q.norm() - 1.0).abs()) > 1e-6 {
            return Err(format!("quaternion norm {} is not 1", q.norm()));
        }
        Ok(TrajectoryRecord {
            t: r.t,
            translation: Vector3::new(r.tx, r.ty, r.tz),
            rotation: UnitQuaternion::new_normalize(q),
        })
    }
}

/// Formats `x` with 9 significant digits.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-5..=12).contains(&magnitude) {
        return format!("{x:.8e}");
    }
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

pub const TRAJECTORY_HEADER: [&str; 8] = ["t", "tx", "ty", "tz", "qx", "qy", "qz", "qw"];

pub fn write_trajectory_to<W: Write>(writer: W, records: &[TrajectoryRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRAJECTORY_HEADER)?;
    for r in records {
        let row = TrajectoryRow::from(r);
        w.write_record([row.t, row.tx, row.ty, row.tz, row.qx, row.qy, row.qz, row.qw].map(sig9))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_from<R: Read>(reader: R) -> Result<Vec<TrajectoryRecord>, IoError> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| IoError::schema("header", e))?;
    if header.iter().ne(TRAJECTORY_HEADER) {
        return Err(IoError::schema("header", format!("expected {}", TRAJECTORY_HEADER.join(","))));
    }
    r.deserialize::<TrajectoryRecord>()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| IoError::schema(format!("row {}", i + 1), e)))
        .collect()
}

pub fn write_trajectory(path: &Path, records: &[TrajectoryRecord]) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    write_trajectory_to(BufWriter::new(file), records).map_err(|e| IoError::schema(path.display().to_string(), e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    read_trajectory_from(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkExport {
    pub id: usize,
    pub position: Vector3<f64>,
    #[serde(default = "default_extent")]
    pub extent: Vector3<f64>,
    pub labels: Vec<String>,
    pub primary_label: String,
    pub status: LandmarkStatus,
    pub observations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapExport {
    pub landmarks: Vec<LandmarkExport>,
    pub m: ConfusionMatrix,
    pub d: ConfusionMatrix,
    #[serde(default)]
    pub label_database: LabelDatabase,
    #[serde(default)]
    pub edit_log: EditLog,
}

impl MapExport {
    pub fn validate(&self) -> Result<(), String> {
        let mut ids: Vec<usize> = self.landmarks.iter().map(|l| l.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err("duplicate landmark ids".into());
        }
        for l in &self.landmarks {
            if l.primary_label.is_empty() || !l.labels.contains(&l.primary_label) {
                return Err(format!("landmark {}: primary label not in label set", l.id));
            }
        }
        for (name, m) in [("m", &self.m), ("d", &self.d)] {
            if m.counts().len() != m.len() || m.counts().iter().any(|r| r.len() != m.len()) {
                return Err(format!("matrix {name} is not square"));
            }
        }
        Ok(())
    }
}

pub fn read_map(path: &Path) -> Result<MapExport, IoError> {
    let map: MapExport = read_json(path)?;
    map.validate().map_err(|m| IoError::schema(path.display().to_string(), m))?;
    Ok(map)
}

pub fn write_map(path: &Path, map: &MapExport) -> Result<(), IoError> {
    write_json(path, map)
}

pub fn write_edit_log(path: &Path, log: &EditLog) -> Result<(), IoError> {
    write_json(path, log)
}
