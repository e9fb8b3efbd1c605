//! Deterministic synthetic worlds, trajectories and detections, plus a
//! ground-truth referee that answers evaluator prompts.

mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;

use nalgebra::{Matrix3, Matrix6, SMatrix, SVector, Vector2, Vector3, Vector6};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::Detection;
use crate::geometry::{project_box, CameraIntrinsics, Pose, Twist, DEFAULT_Z_MIN};
use crate::pipeline::Frame;

pub use oracle::{ScriptedOracle, ScriptedOracleConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown object {0}")]
    UnknownObject(u32),
    #[error("object id {0} already exists")]
    DuplicateObject(u32),
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
}

pub const CATEGORIES: &[&str] = &[
    "apple", "bag", "banana", "bin", "book", "bottle", "bowl", "box", "chair", "cup", "fan", "flower", "football",
    "hammer", "helmet", "monitor", "racquet", "scissors", "shoe", "snowman", "teacup", "vase",
];

const COLORS: &[&str] = &["red", "blue", "green", "yellow", "white", "black", "gray", "brown", "orange", "purple"];

pub const ROOM_SIZE: f64 = 6.0;
pub const ROOM_HEIGHT: f64 = 1.0;
const ROOM_CENTER: Vector2<f64> = Vector2::new(3.0, 3.0);
const PLACEMENT_RADIUS: f64 = 2.2;
const GROUP_RADIUS: f64 = 0.2;
const MIN_SEPARATION: f64 = 0.6;
const MAX_EXTENT_Z: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: u32,
    #[serde(rename = "pos")]
    pub position: Vector3<f64>,
    pub extent: Vector3<f64>,
    pub category: String,
    pub descriptive: String,
    /// First frame at which the object is gone.
    pub active_until: Option<u64>,
    /// First frame at which the object exists (objects added mid-run).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_from: Option<u64>,
}

impl WorldObject {
    pub fn is_active(&self, frame: u64) -> bool {
        self.active_from.is_none_or(|f| frame >= f) && self.active_until.is_none_or(|u| frame < u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SceneAction {
    Remove,
    Add { object: WorldObject },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneChangeEvent {
    pub frame: u64,
    pub object_id: u32,
    pub action: SceneAction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldGT {
    pub objects: Vec<WorldObject>,
    #[serde(default)]
    pub events: Vec<SceneChangeEvent>,
}

impl WorldGT {
    pub fn object(&self, id: u32) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn active_at(&self, frame: u64) -> impl Iterator<Item = &WorldObject> {
        self.objects.iter().filter(move |o| o.is_active(frame))
    }

    /// Sorted, de-duplicated category vocabulary.
    pub fn categories(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.category.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Objects that remain active through the end of a run of `n_frames`.
    pub fn final_objects(&self, n_frames: u64) -> impl Iterator<Item = &WorldObject> {
        let last = n_frames.saturating_sub(1);
        self.active_at(last)
    }
}

/// Zero-mean Gaussian with covariance `L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Gaussian<const N: usize> {
    l: SMatrix<f64, N, N>,
}

impl<const N: usize> Gaussian<N> {
    /// `None` for the zero matrix, an error if not positive-definite.
    pub fn new(cov: &SMatrix<f64, N, N>) -> Result<Option<Self>, SimError> {
        if cov.iter().all(|x| *x == 0.0) {
            return Ok(None);
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| SimError::InvalidConfig("noise covariance must be positive-definite".into()))?;
        Ok(Some(Self { l: chol.l() }))
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> SVector<f64, N> {
        let z = SVector::<f64, N>::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        self.l * z
    }
}

pub fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_in_disc(rng: &mut ChaCha8Rng, radius: f64) -> Vector2<f64> {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..TAU);
    ROOM_CENTER + Vector2::new(r * a.cos(), r * a.sin())
}

fn sample_extent(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.random_range(0.1..0.25), rng.random_range(0.1..0.25), rng.random_range(0.1..MAX_EXTENT_Z))
}

/// Random room layout. Same-category groups hold 2–3 objects on a small
/// circle with distinct color prefixes; other objects are spread apart.
pub fn generate_world(seed: u64, n_objects: usize, n_groups: usize) -> Result<WorldGT, SimError> {
    if n_objects < 2 * n_groups {
        return Err(SimError::InvalidConfig(format!("{n_objects} objects cannot hold {n_groups} groups of two")));
    }
    let mut rng = frame_rng(seed, u64::MAX);
    let mut cats: Vec<&str> = CATEGORIES.to_vec();
    for i in (1..cats.len()).rev() {
        cats.swap(i, rng.random_range(0..=i));
    }
    let mut cat_iter = cats.iter().cycle();

    // group sizes: 3 while the budget allows it, else 2
    let mut sizes = Vec::with_capacity(n_groups);
    let mut remaining = n_objects;
    for g in 0..n_groups {
        let reserve = 2 * (n_groups - g - 1);
        let size = if remaining >= reserve + 3 && rng.random_bool(0.5) { 3 } else { 2 };
        sizes.push(size);
        remaining -= size;
    }

    let mut objects: Vec<WorldObject> = Vec::with_capacity(n_objects);
    let far_enough = |objs: &[WorldObject], p: &Vector2<f64>, margin: f64| {
        objs.iter().all(|o| (o.position.xy() - p).norm() >= margin)
    };
    let place = |rng: &mut ChaCha8Rng, objs: &[WorldObject], margin: f64, radius: f64| {
        for _ in 0..10_000 {
            let p = sample_in_disc(rng, radius);
            if far_enough(objs, &p, margin) {
                return p;
            }
        }
        sample_in_disc(rng, radius)
    };
    // objects rest on a surface; group members share one
    let surface = |rng: &mut ChaCha8Rng| rng.random_range(0.0..(ROOM_HEIGHT - MAX_EXTENT_Z));

    for size in sizes {
        let category = cat_iter.next().expect("cycle");
        let center = place(&mut rng, &objects, MIN_SEPARATION + GROUP_RADIUS, PLACEMENT_RADIUS - GROUP_RADIUS);
        let phase = rng.random_range(0.0..TAU);
        let base = surface(&mut rng);
        let mut colors: Vec<&str> = COLORS.to_vec();
        for k in 0..size {
            let c = colors.remove(rng.random_range(0..colors.len()));
            let a = phase + TAU * k as f64 / size as f64;
            let xy = center + GROUP_RADIUS * Vector2::new(a.cos(), a.sin());
            let extent = sample_extent(&mut rng);
            let z = base + extent.z / 2.0;
            objects.push(WorldObject {
                id: objects.len() as u32,
                position: Vector3::new(xy.x, xy.y, z),
                extent,
                category: category.to_string(),
                descriptive: format!("{c} {category}"),
                active_until: None,
                active_from: None,
            });
        }
    }
    while objects.len() < n_objects {
        let category = cat_iter.next().expect("cycle");
        let xy = place(&mut rng, &objects, MIN_SEPARATION, PLACEMENT_RADIUS);
        let extent = sample_extent(&mut rng);
        let z = surface(&mut rng) + extent.z / 2.0;
        let c = COLORS[rng.random_range(0..COLORS.len())];
        objects.push(WorldObject {
            id: objects.len() as u32,
            position: Vector3::new(xy.x, xy.y, z),
            extent,
            category: category.to_string(),
            descriptive: format!("{c} {category}"),
            active_until: None,
            active_from: None,
        });
    }
    Ok(WorldGT { objects, events: Vec::new() })
}

pub fn apply_scene_change(world: &WorldGT, e: &SceneChangeEvent) -> Result<WorldGT, SimError> {
    let mut w = world.clone();
    match &e.action {
        SceneAction::Remove => {
            let obj = w.objects.iter_mut().find(|o| o.id == e.object_id).ok_or(SimError::UnknownObject(e.object_id))?;
            obj.active_until = Some(obj.active_until.map_or(e.frame, |u| u.min(e.frame)));
        }
        SceneAction::Add { object } => {
            if w.object(e.object_id).is_some() {
                return Err(SimError::DuplicateObject(e.object_id));
            }
            let mut o = object.clone();
            o.id = e.object_id;
            o.active_from = Some(e.frame);
            w.objects.push(o);
        }
    }
    w.events.push(e.clone());
    Ok(w)
}

/// Camera looking horizontally at `target` from `eye`; columns are the
/// camera axes (right, down, forward) in world coordinates.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let mut forward = target - eye;
    forward.z = 0.0;
    let forward = forward.normalize();
    let down = Vector3::new(0.0, 0.0, -1.0);
    let right = down.cross(&forward);
    Pose::new(Matrix3::from_columns(&[right, down, forward]), *eye).expect("orthonormal by construction")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub gt: Vec<Pose>,
    /// `odometry[0]` is the stated origin (equal to `gt[0]`); later entries
    /// are noisy relative motions.
    pub odometry: Vec<Pose>,
}

impl Trajectory {
    pub fn dead_reckoning(&self) -> Vec<Pose> {
        let mut out: Vec<Pose> = Vec::with_capacity(self.odometry.len());
        for (i, o) in self.odometry.iter().enumerate() {
            out.push(if i == 0 { *o } else { out[i - 1].compose(o) });
        }
        out
    }
}

/// Two loops around the room center with gently varying radius and height,
/// always facing the center.
pub fn generate_trajectory(seed: u64, n_frames: usize, odom_noise: &Matrix6<f64>) -> Result<Trajectory, SimError> {
    if n_frames < 2 {
        return Err(SimError::InvalidConfig("a trajectory needs at least two frames".into()));
    }
    let target = Vector3::new(ROOM_CENTER.x, ROOM_CENTER.y, 0.5);
    let gt: Vec<Pose> = (0..n_frames)
        .map(|i| {
            let phi = 2.0 * TAU * i as f64 / n_frames as f64;
            let r = 3.0 + 0.3 * (3.0 * phi).sin();
            let eye = Vector3::new(
                ROOM_CENTER.x + r * phi.cos(),
                ROOM_CENTER.y + r * phi.sin(),
                0.5 + 0.1 * (2.0 * phi).sin(),
            );
            look_at(&eye, &target)
        })
        .collect();
    let noise = Gaussian::<6>::new(odom_noise)?;
    let mut rng = frame_rng(seed, u64::MAX - 1);
    let mut odometry = vec![gt[0]];
    for w in gt.windows(2) {
        let rel = w[0].inverse().compose(&w[1]);
        let noisy = match &noise {
            None => rel,
            Some(n) => rel.compose(&Pose::exp(&Twist::from_vector(&n.sample(&mut rng)))),
        };
        odometry.push(noisy);
    }
    Ok(Trajectory { gt, odometry })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSim {
    pub range: f64,
    pub fov_half_angle: f64,
    pub miss_prob: f64,
    /// Expected false detections per frame.
    pub clutter_rate: f64,
    pub point_cov: Matrix3<f64>,
    /// Probability that a detection carries the category's confuser label
    /// when no explicit row is given.
    pub confusion_prob: f64,
    /// Explicit rows `true → {observed: probability}`; override the default.
    pub confusion_table: BTreeMap<String, BTreeMap<String, f64>>,
    pub beta_correct: (f64, f64),
    pub beta_confused: (f64, f64),
    pub min_confidence: f64,
}

impl Default for DetectorSim {
    fn default() -> Self {
        Self {
            range: 5.0,
            fov_half_angle: 0.7,
            miss_prob: 0.1,
            clutter_rate: 0.2,
            point_cov: Matrix3::identity() * 0.02f64.powi(2),
            confusion_prob: 0.1,
            confusion_table: BTreeMap::new(),
            beta_correct: (8.0, 2.0),
            beta_confused: (4.0, 4.0),
            min_confidence: 0.5,
        }
    }
}

impl DetectorSim {
    pub fn noiseless() -> Self {
        Self { miss_prob: 0.0, clutter_rate: 0.0, point_cov: Matrix3::zeros(), confusion_prob: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.miss_prob) || !prob(self.confusion_prob) || !prob(self.min_confidence) {
            return Err(SimError::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        if self.clutter_rate < 0.0 || self.range <= 0.0 || self.fov_half_angle <= 0.0 {
            return Err(SimError::InvalidConfig("rates, range and field of view must be positive".into()));
        }
        let sym = (self.point_cov - self.point_cov.transpose()).abs().max() <= 1e-12;
        if !sym || (self.point_cov != Matrix3::zeros() && self.point_cov.cholesky().is_none()) {
            return Err(SimError::InvalidConfig("point covariance must be positive-definite (or zero)".into()));
        }
        for (t, row) in &self.confusion_table {
            let s: f64 = row.values().sum();
            if row.values().any(|p| !prob(*p)) || (s - 1.0).abs() > 1e-9 {
                return Err(SimError::InvalidConfig(format!("confusion row {t:?} is not a distribution")));
            }
        }
        Ok(())
    }
}

/// Deterministic stand-in for a frequently confused class: the next
/// category in the vocabulary.
pub fn confuser(category: &str, vocabulary: &[String]) -> String {
    match vocabulary.iter().position(|c| c == category) {
        Some(i) if vocabulary.len() > 1 => vocabulary[(i + 1) % vocabulary.len()].clone(),
        _ => category.to_string(),
    }
}

fn sample_label(rng: &mut ChaCha8Rng, category: &str, det: &DetectorSim, vocabulary: &[String]) -> String {
    let u: f64 = rng.random();
    if let Some(row) = det.confusion_table.get(category) {
        let mut acc = 0.0;
        for (label, p) in row {
            acc += p;
            if u < acc {
                return label.clone();
            }
        }
        return row.keys().next_back().cloned().unwrap_or_else(|| category.to_string());
    }
    if u < det.confusion_prob {
        confuser(category, vocabulary)
    } else {
        category.to_string()
    }
}

fn beta(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    Beta::new(a, b).map(|d| d.sample(rng)).unwrap_or(1.0)
}

/// Detections for one frame, seeded by `(seed, frame)`.
pub fn simulate_detections(
    world: &WorldGT,
    pose: &Pose,
    frame: u64,
    det: &DetectorSim,
    k: &CameraIntrinsics,
    seed: u64,
) -> Vec<Detection> {
    let mut rng = frame_rng(seed, frame);
    let vocabulary = world.categories();
    let point_noise = Gaussian::<3>::new(&det.point_cov).ok().flatten();
    let mut out = Vec::new();
    for obj in world.active_at(frame) {
        let p = pose.transform_to_frame(&obj.position);
        if p.z <= DEFAULT_Z_MIN || p.norm() > det.range || (p.xy().norm()).atan2(p.z) > det.fov_half_angle {
            continue;
        }
        let Ok(center) = k.project(&p) else { continue };
        if center.x < 0.0 || center.y < 0.0 || center.x >= k.width as f64 || center.y >= k.height as f64 {
            continue;
        }
        let Some(pixel_box) =
            project_box(k, pose, &obj.position, &obj.extent, DEFAULT_Z_MIN).and_then(|b| b.clip(k.width, k.height))
        else {
            continue;
        };
        // draw every random quantity so outcomes stay aligned across configs
        let missed = rng.random::<f64>() < det.miss_prob;
        let noise = point_noise.as_ref().map_or(Vector3::zeros(), |n| n.sample(&mut rng));
        let label = sample_label(&mut rng, &obj.category, det, &vocabulary);
        let params = if label == obj.category { det.beta_correct } else { det.beta_confused };
        let confidence = beta(&mut rng, params);
        if missed || confidence < det.min_confidence {
            continue;
        }
        let mut point_cam = p + noise;
        point_cam.z = point_cam.z.max(DEFAULT_Z_MIN);
        out.push(Detection { label, confidence, pixel_box, point_cam, extent: Some(obj.extent) });
    }
    if det.clutter_rate > 0.0 && !vocabulary.is_empty() {
        let n = Poisson::new(det.clutter_rate).map(|d| d.sample(&mut rng) as usize).unwrap_or(0);
        for _ in 0..n {
            let px = Vector2::new(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64));
            let depth = rng.random_range(1.0..det.range.max(1.0 + 1e-9));
            let point_cam = k.back_project(&px, depth);
            let label = vocabulary[rng.random_range(0..vocabulary.len())].clone();
            let confidence = beta(&mut rng, det.beta_confused);
            if confidence < det.min_confidence {
                continue;
            }
            let half = 0.1 * k.fx / depth;
            let pixel_box = crate::geometry::PixelBox {
                u_min: px.x - half,
                v_min: px.y - half,
                u_max: px.x + half,
                v_max: px.y + half,
            }
            .clip(k.width, k.height)
            .unwrap_or(crate::geometry::PixelBox { u_min: px.x, v_min: px.y, u_max: px.x, v_max: px.y });
            out.push(Detection { label, confidence, pixel_box, point_cam, extent: None });
        }
    }
    out
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).expect("valid intrinsics")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_objects: usize,
    pub n_groups: usize,
    pub n_frames: usize,
    pub frame_period: f64,
    /// Per-step odometry noise standard deviations (rad, m).
    pub odom_sigma_rot: f64,
    pub odom_sigma_trans: f64,
    pub detector: DetectorSim,
    pub events: Vec<SceneChangeEvent>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_objects: 20,
            n_groups: 3,
            n_frames: 80,
            frame_period: 0.1,
            odom_sigma_rot: 0.003,
            odom_sigma_trans: 0.01,
            detector: DetectorSim::default(),
            events: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn odom_covariance(&self) -> Matrix6<f64> {
        let r = self.odom_sigma_rot.powi(2);
        let t = self.odom_sigma_trans.powi(2);
        Matrix6::from_diagonal(&Vector6::new(r, r, r, t, t, t))
    }
}

/// Covariance reported for odometry when the simulation is noise-free; the
/// pipeline needs a positive-definite matrix.
const NOISE_FREE_ODOM_VARIANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub world: WorldGT,
    pub frames: Vec<Frame>,
    pub trajectory: Trajectory,
    pub timestamps: Vec<f64>,
}

/// World, trajectory and per-frame detections for `cfg`. Scene-change
/// events are applied before detections are simulated.
pub fn simulate(cfg: &SimConfig) -> Result<SimDataset, SimError> {
    cfg.detector.validate()?;
    let mut world = generate_world(cfg.seed, cfg.n_objects, cfg.n_groups)?;
    for e in &cfg.events {
        world = apply_scene_change(&world, e)?;
    }
    let cov = cfg.odom_covariance();
    let trajectory = generate_trajectory(cfg.seed, cfg.n_frames, &cov)?;
    let reported_cov = if cov == Matrix6::zeros() { Matrix6::identity() * NOISE_FREE_ODOM_VARIANCE } else { cov };
    let k = default_intrinsics();
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut timestamps = Vec::with_capacity(cfg.n_frames);
    for (i, (gt, odom)) in trajectory.gt.iter().zip(&trajectory.odometry).enumerate() {
        let t = i as f64 * cfg.frame_period;
        timestamps.push(t);
        frames.push(Frame {
            frame: i as u64,
            t,
            odom: *odom,
            odom_cov: reported_cov,
            intrinsics: k,
            detections: simulate_detections(&world, gt, i as u64, &cfg.detector, &k, cfg.seed),
        });
    }
    Ok(SimDataset { world, frames, trajectory, timestamps })
}

/// Convenience: removes one object at `frame`.
pub fn removal_event(frame: u64, object_id: u32) -> SceneChangeEvent {
    SceneChangeEvent { frame, object_id, action: SceneAction::Remove }
}
