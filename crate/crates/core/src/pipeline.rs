//! Frame-by-frame orchestration: odometry, detection filtering and
//! relabeling, association, optimization, duplicate resolution and
//! evaluator rounds.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{info, warn};
use nalgebra::{DMatrix, Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{associate_frame, AssociationConfig, Detection, RejectReason};
use crate::geometry::{CameraIntrinsics, GeometryError, Pose};
use crate::graph::{ConvergenceReport, Factor, GraphError, NoiseModel, OptimizerConfig, VariableKey};
use crate::io::{LandmarkExport, MapExport, TrajectoryRecord};
use crate::map::{MapState, DEFAULT_EXTENT};
use crate::semantics::{
    find_duplicate_pairs, posterior_class_update, resolve_duplicates, DuplicateConfig, EmbeddingProvider,
    LabelDatabase, LandmarkSemantics, NgramEmbedding,
};
use crate::simulator::{ScriptedOracle, ScriptedOracleConfig, WorldGT};
use crate::supervision::{
    apply_feedback, build_composite, parse_class_label_gen, parse_landmark_eval, render_class_label_gen_prompt,
    render_landmark_eval_prompt, CompositeSpec, Edit, EditLog, HttpOracle, Oracle, RemovalReason, SupervisionError,
    DEFAULT_MAX_OVERLAYS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {got} arrived after frame {last}")]
    OutOfOrderFrame { last: u64, got: u64 },
    #[error("frame {frame}: timestamp {t} precedes the previous one")]
    TimestampRegression { frame: u64, t: f64 },
    #[error("frame {frame}: {message}")]
    InvalidFrame { frame: u64, message: String },
    #[error("frame {frame}: {source}")]
    Graph { frame: u64, source: GraphError },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame: u64,
    pub t: f64,
    /// Relative motion since the previous frame; for the first frame, the
    /// pose of the origin.
    pub odom: Pose,
    pub odom_cov: Matrix6<f64>,
    pub intrinsics: CameraIntrinsics,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Scripted,
    Http,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub association: AssociationConfig,
    /// Evaluator rounds run on frames whose id is a multiple of this.
    pub cadence: u64,
    pub oracle: OracleMode,
    pub oracle_url: Option<String>,
    pub oracle_timeout_s: f64,
    /// Block at the next frame boundary until outstanding rounds return.
    /// Keeps runs reproducible; turn off for live evaluators.
    pub wait_for_feedback: bool,
    pub scripted_oracle: ScriptedOracleConfig,
    pub relabel_margin: f64,
    pub min_confidence: f64,
    pub duplicates: DuplicateConfig,
    pub optimizer: OptimizerConfig,
    pub min_observations: usize,
    /// Isotropic standard deviation of the camera-frame point measurement (m).
    pub observation_sigma: f64,
    /// Standard deviation of the origin prior (per tangent component).
    pub prior_sigma: f64,
    pub max_overlays: usize,
    pub confusion_smoothing: f64,
    pub initial_labels: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            association: AssociationConfig::default(),
            cadence: 5,
            oracle: OracleMode::None,
            oracle_url: None,
            oracle_timeout_s: 30.0,
            wait_for_feedback: true,
            scripted_oracle: ScriptedOracleConfig::default(),
            relabel_margin: 0.1,
            min_confidence: 0.5,
            duplicates: DuplicateConfig::default(),
            optimizer: OptimizerConfig::default(),
            min_observations: 2,
            observation_sigma: 0.05,
            prior_sigma: 1e-3,
            max_overlays: DEFAULT_MAX_OVERLAYS,
            confusion_smoothing: 1.0,
            initial_labels: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: &str| Err(PipelineError::Config(m.to_string()));
        self.association.validate().map_err(PipelineError::Config)?;
        if self.cadence == 0 {
            return err("cadence must be ≥ 1");
        }
        if !(self.observation_sigma > 0.0 && self.prior_sigma > 0.0 && self.confusion_smoothing > 0.0) {
            return err("observation_sigma, prior_sigma and confusion_smoothing must be positive");
        }
        if !(0.0..=1.0).contains(&self.relabel_margin) || !(0.0..=1.0).contains(&self.min_confidence) {
            return err("relabel_margin and min_confidence must lie in [0, 1]");
        }
        if !(self.duplicates.iou > 0.0 && self.duplicates.iou <= 1.0 && self.duplicates.distance > 0.0) {
            return err("duplicate thresholds out of range");
        }
        if self.oracle_timeout_s.is_nan() || self.oracle_timeout_s <= 0.0 {
            return err("oracle_timeout_s must be positive");
        }
        if self.max_overlays == 0 {
            return err("max_overlays must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.scripted_oracle.error_rate) || self.scripted_oracle.match_radius <= 0.0 {
            return err("scripted_oracle settings out of range");
        }
        if self.oracle == OracleMode::Http && self.oracle_url.is_none() {
            return err("oracle mode http needs oracle_url");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub frame: u64,
    pub detections: usize,
    pub filtered: usize,
    pub relabeled: usize,
    pub assigned: usize,
    pub new_landmarks: usize,
    pub rejected_geometric: usize,
    pub rejected_semantic: usize,
    pub proactive_merges: usize,
    pub feedback_rounds: usize,
    pub edits: usize,
    pub dispatched: bool,
    pub optimizer: Option<ConvergenceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub map: MapExport,
    pub trajectory: Vec<TrajectoryRecord>,
    pub edit_log: EditLog,
    pub reports: Vec<StepReport>,
}

struct Round {
    spec: CompositeSpec,
    eval: Result<String, SupervisionError>,
    gen: Result<String, SupervisionError>,
}

struct Worker {
    tx: Option<Sender<CompositeSpec>>,
    rx: Receiver<Round>,
    handle: Option<JoinHandle<()>>,
    pending: usize,
}

impl Worker {
    fn spawn(mut oracle: Box<dyn Oracle>) -> Self {
        let (tx, requests) = mpsc::channel::<CompositeSpec>();
        let (results, rx) = mpsc::channel::<Round>();
        let handle = std::thread::spawn(move || {
            for spec in requests {
                let eval = oracle.landmark_eval(&spec, &render_landmark_eval_prompt(&spec));
                let gen = oracle.class_label_gen(&spec, &render_class_label_gen_prompt(&spec));
                if results.send(Round { spec, eval, gen }).is_err() {
                    break;
                }
            }
        });
        Self { tx: Some(tx), rx, handle: Some(handle), pending: 0 }
    }

    fn dispatch(&mut self, spec: CompositeSpec) {
        if let Some(tx) = &self.tx {
            if tx.send(spec).is_ok() {
                self.pending += 1;
            }
        }
    }

    fn collect(&mut self, wait: bool, timeout: Duration) -> Vec<Round> {
        let mut out = Vec::new();
        while self.pending > 0 {
            let next = if wait {
                match self.rx.recv_timeout(timeout) {
                    Ok(r) => Some(r),
                    Err(RecvTimeoutError::Timeout) => {
                        warn!("evaluator round timed out; its feedback will be applied when it arrives");
                        None
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        self.pending = 0;
                        None
                    }
                }
            } else {
                self.rx.try_recv().ok()
            };
            let Some(r) = next else { break };
            self.pending -= 1;
            out.push(r);
        }
        out
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    map: MapState,
    provider: Box<dyn EmbeddingProvider>,
    gamma: NoiseModel,
    poses: Vec<(u64, f64, VariableKey)>,
    last: Option<(u64, f64)>,
    intrinsics: Option<CameraIntrinsics>,
    last_dispatch: Option<u64>,
    worker: Option<Worker>,
    edit_log: EditLog,
    reports: Vec<StepReport>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, oracle: Option<Box<dyn Oracle>>) -> Result<Self, PipelineError> {
        Self::with_provider(cfg, oracle, Box::new(NgramEmbedding::default()))
    }

    pub fn with_provider(
        cfg: PipelineConfig,
        oracle: Option<Box<dyn Oracle>>,
        provider: Box<dyn EmbeddingProvider>,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let gamma =
            NoiseModel::isotropic(3, cfg.observation_sigma).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut map = MapState::new(LabelDatabase::new(cfg.initial_labels.iter().cloned()));
        map.m = crate::semantics::ConfusionMatrix::new(cfg.confusion_smoothing);
        map.d = crate::semantics::ConfusionMatrix::new(cfg.confusion_smoothing);
        Ok(Self {
            cfg,
            map,
            provider,
            gamma,
            poses: Vec::new(),
            last: None,
            intrinsics: None,
            last_dispatch: None,
            worker: oracle.map(Worker::spawn),
            edit_log: EditLog::default(),
            reports: Vec::new(),
        })
    }

    pub fn map(&self) -> &MapState {
        &self.map
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn edit_log(&self) -> &EditLog {
        &self.edit_log
    }

    pub fn pose_count(&self) -> usize {
        self.poses.len()
    }

    fn graph_err(frame: u64) -> impl Fn(GraphError) -> PipelineError {
        move |source| PipelineError::Graph { frame, source }
    }

    fn optimize(&mut self, frame: u64) -> Result<ConvergenceReport, PipelineError> {
        let report = self.map.graph.optimize(&self.cfg.optimizer).map_err(Self::graph_err(frame))?;
        self.map.sync_positions();
        Ok(report)
    }

    fn validate_frame(&self, f: &Frame) -> Result<(), PipelineError> {
        if let Some((last, t)) = self.last {
            if f.frame <= last {
                return Err(PipelineError::OutOfOrderFrame { last, got: f.frame });
            }
            if f.t < t {
                return Err(PipelineError::TimestampRegression { frame: f.frame, t: f.t });
            }
        }
        let invalid = |message: String| PipelineError::InvalidFrame { frame: f.frame, message };
        f.intrinsics.validate().map_err(|e: GeometryError| invalid(e.to_string()))?;
        if !f.odom.is_finite() {
            return Err(invalid("non-finite odometry".into()));
        }
        for (i, d) in f.detections.iter().enumerate() {
            d.validate().map_err(|e| invalid(format!("detection {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn step(&mut self, frame: &Frame) -> Result<StepReport, PipelineError> {
        self.validate_frame(frame)?;
        let fid = frame.frame;
        let err = Self::graph_err(fid);
        let mut report = StepReport { frame: fid, detections: frame.detections.len(), ..StepReport::default() };

        // odometry
        let pose_key = match self.poses.last() {
            None => {
                let key = self.map.graph.add_pose(frame.odom).map_err(&err)?;
                let noise = NoiseModel::isotropic(6, self.cfg.prior_sigma).map_err(&err)?;
                self.map.graph.add_factor(Factor::PriorPose { key, mean: frame.odom, noise }).map_err(&err)?;
                key
            }
            Some(&(_, _, prev)) => {
                let prev_pose = *self.map.graph.estimate().pose(prev).map_err(&err)?;
                let key = self.map.graph.add_pose(prev_pose.compose(&frame.odom)).map_err(&err)?;
                let cov = DMatrix::from_iterator(6, 6, frame.odom_cov.iter().copied());
                let noise = NoiseModel::new(cov).map_err(&err)?;
                self.map
                    .graph
                    .add_factor(Factor::Between { a: prev, b: key, relative: frame.odom, noise })
                    .map_err(&err)?;
                key
            }
        };
        self.poses.push((fid, frame.t, pose_key));
        self.last = Some((fid, frame.t));
        self.intrinsics = Some(frame.intrinsics);

        // detection filter and posterior relabeling
        let mut dets: Vec<Detection> = Vec::with_capacity(frame.detections.len());
        for d in &frame.detections {
            if d.confidence < self.cfg.min_confidence {
                report.filtered += 1;
                continue;
            }
            let mut d = d.clone();
            let post = posterior_class_update(&d.label, d.confidence, &self.map.m);
            if post.label != d.label
                && post.probability(&post.label) - post.probability(&d.label) > self.cfg.relabel_margin
            {
                d.label = post.label;
                report.relabeled += 1;
            }
            dets.push(d);
        }

        // association and graph update
        let assoc =
            associate_frame(&dets, &self.map, pose_key, &self.gamma, self.provider.as_ref(), &self.cfg.association);
        let camera = *self.map.graph.estimate().pose(pose_key).map_err(&err)?;
        for a in &assoc.assignments {
            self.map
                .graph
                .add_factor(Factor::Observation {
                    pose: pose_key,
                    landmark: a.landmark,
                    measured: dets[a.detection].point_cam,
                    noise: self.gamma.clone(),
                })
                .map_err(&err)?;
        }
        report.assigned = assoc.assignments.len();
        report.new_landmarks = assoc.new_landmarks.len();
        for (_, reason) in &assoc.rejected {
            match reason {
                RejectReason::GeomFail => report.rejected_geometric += 1,
                RejectReason::SemFail => report.rejected_semantic += 1,
            }
        }
        let spawn: Vec<usize> =
            assoc.new_landmarks.iter().copied().chain(assoc.rejected.iter().map(|(i, _)| *i)).collect();
        for i in spawn {
            let d = &dets[i];
            let semantics = LandmarkSemantics::new(&d.label)
                .map_err(|e| PipelineError::InvalidFrame { frame: fid, message: e.to_string() })?;
            let extent = d.extent.unwrap_or_else(|| Vector3::repeat(DEFAULT_EXTENT));
            let key = self
                .map
                .add_landmark(camera.transform_from_frame(&d.point_cam), extent, semantics, fid)
                .map_err(&err)?;
            self.map
                .graph
                .add_factor(Factor::Observation {
                    pose: pose_key,
                    landmark: key,
                    measured: d.point_cam,
                    noise: self.gamma.clone(),
                })
                .map_err(&err)?;
        }

        report.optimizer = Some(self.optimize(fid)?);

        // proactive duplicate resolution
        let camera = *self.map.graph.estimate().pose(pose_key).map_err(&err)?;
        let merged = resolve_proactive_duplicates(
            &mut self.map,
            &camera,
            &frame.intrinsics,
            &self.cfg.duplicates,
            fid,
            &mut self.edit_log,
        )
        .map_err(&err)?;
        report.proactive_merges = merged;
        if merged > 0 {
            report.optimizer = Some(self.optimize(fid)?);
        }

        // evaluator feedback, then a new round on cadence frames
        let (rounds, edits) = self.apply_queued(self.cfg.wait_for_feedback, fid)?;
        report.feedback_rounds = rounds;
        report.edits = edits;
        if fid % self.cfg.cadence == 0 {
            report.dispatched = self.dispatch(fid, pose_key, &frame.intrinsics);
        }

        self.reports.push(report.clone());
        Ok(report)
    }

    fn dispatch(&mut self, fid: u64, pose_key: VariableKey, k: &CameraIntrinsics) -> bool {
        let Some(worker) = self.worker.as_mut() else { return false };
        self.last_dispatch = Some(fid);
        let Ok(camera) = self.map.graph.estimate().pose(pose_key) else { return false };
        let spec = build_composite(&self.map, camera, k, fid, self.cfg.max_overlays);
        if spec.is_empty() {
            return false;
        }
        worker.dispatch(spec);
        true
    }

    fn apply_queued(&mut self, wait: bool, fid: u64) -> Result<(usize, usize), PipelineError> {
        let Some(worker) = self.worker.as_mut() else { return Ok((0, 0)) };
        let timeout = Duration::from_secs_f64(self.cfg.oracle_timeout_s + 1.0);
        let rounds = worker.collect(wait, timeout);
        let n_rounds = rounds.len();
        let mut n_edits = 0;
        for r in rounds {
            let eval = r.eval.and_then(|t| parse_landmark_eval(&t));
            let gen = r.gen.and_then(|t| parse_class_label_gen(&t));
            let (eval, gen) = match (eval, gen) {
                (Ok(e), Ok(g)) => (e, g),
                (Ok(e), Err(ge)) => {
                    warn!("frame {}: label generation skipped: {ge}", r.spec.frame_id);
                    (e, Default::default())
                }
                (Err(ee), Ok(g)) => {
                    warn!("frame {}: landmark evaluation skipped: {ee}", r.spec.frame_id);
                    (Default::default(), g)
                }
                (Err(ee), Err(_)) => {
                    warn!("frame {}: evaluator round skipped: {ee}", r.spec.frame_id);
                    continue;
                }
            };
            let log = apply_feedback(&eval, &gen, &r.spec, &mut self.map);
            info!("frame {fid}: applied round from frame {} ({} edits)", r.spec.frame_id, log.edits.len());
            n_edits += log.edits.len();
            self.edit_log.extend(log);
        }
        if n_edits > 0 && !self.poses.is_empty() {
            self.optimize(fid)?;
        }
        Ok((n_rounds, n_edits))
    }

    /// Runs a last evaluator round on the final frame, drains all pending
    /// feedback and re-optimizes.
    pub fn finish(&mut self) -> Result<RunResult, PipelineError> {
        if let (Some(&(fid, _, key)), Some(k)) = (self.poses.last(), self.intrinsics) {
            if self.last_dispatch != Some(fid) {
                self.dispatch(fid, key, &k);
            }
            self.apply_queued(true, fid)?;
            self.optimize(fid)?;
        }
        Ok(self.result())
    }

    pub fn trajectory(&self) -> Vec<TrajectoryRecord> {
        let est = self.map.graph.estimate();
        self.poses
            .iter()
            .filter_map(|(_, t, key)| est.pose(*key).ok().map(|p| TrajectoryRecord::from_pose(*t, p)))
            .collect()
    }

    pub fn export_map(&self) -> MapExport {
        let landmarks = self
            .map
            .landmarks
            .values()
            .filter_map(|l| {
                let n = self.map.observation_count(l.key);
                (n >= self.cfg.min_observations).then(|| LandmarkExport {
                    id: l.key.index,
                    position: l.position,
                    extent: l.extent,
                    labels: l.semantics.labels().to_vec(),
                    primary_label: l.semantics.primary_label().to_string(),
                    status: l.semantics.status,
                    observations: n,
                })
            })
            .collect();
        MapExport {
            landmarks,
            m: self.map.m.clone(),
            d: self.map.d.clone(),
            label_database: self.map.label_db.clone(),
            edit_log: self.edit_log.clone(),
        }
    }

    pub fn result(&self) -> RunResult {
        RunResult {
            map: self.export_map(),
            trajectory: self.trajectory(),
            edit_log: self.edit_log.clone(),
            reports: self.reports.clone(),
        }
    }
}

/// Finds co-located landmarks seen from `camera` whose labels the D matrix
/// ranks, folds the generic one into the precise one and removes it.
/// Returns the number of landmarks removed.
pub fn resolve_proactive_duplicates(
    map: &mut MapState,
    camera: &Pose,
    k: &CameraIntrinsics,
    cfg: &DuplicateConfig,
    frame: u64,
    log: &mut EditLog,
) -> Result<usize, GraphError> {
    let pairs = find_duplicate_pairs(map.landmarks.values(), camera, k, cfg);
    let resolutions = resolve_duplicates(&pairs, &map.d, &map.landmarks);
    for r in &resolutions {
        let removed = map.landmarks[&r.removed].semantics.clone();
        if let Some(s) = map.landmarks.get_mut(&r.survivor) {
            s.semantics.merge(&removed);
        }
        let factors = map.remove_landmark(r.removed)?;
        log.edits.push(Edit::Removed {
            frame,
            landmark: r.removed,
            reason: RemovalReason::ProactiveDuplicate,
            factors,
        });
        log.edits.push(Edit::Merged { frame, survivor: r.survivor, removed: r.removed });
    }
    Ok(resolutions.len())
}

/// The evaluator selected by `cfg.oracle`. Scripted mode referees against
/// `world`, which it then requires.
pub fn oracle_for(cfg: &PipelineConfig, world: Option<WorldGT>) -> Result<Option<Box<dyn Oracle>>, PipelineError> {
    Ok(match cfg.oracle {
        OracleMode::None => None,
        OracleMode::Http => {
            let url = cfg
                .oracle_url
                .as_deref()
                .ok_or_else(|| PipelineError::Config("oracle mode http needs oracle_url".into()))?;
            Some(Box::new(HttpOracle::new(url, Duration::from_secs_f64(cfg.oracle_timeout_s))))
        }
        OracleMode::Scripted => {
            let world =
                world.ok_or_else(|| PipelineError::Config("scripted oracle needs a ground-truth world".into()))?;
            Some(Box::new(ScriptedOracle::new(world, cfg.scripted_oracle.clone())))
        }
    })
}

/// Steps through every frame and finishes the run.
pub fn run(
    frames: &[Frame],
    cfg: &PipelineConfig,
    oracle: Option<Box<dyn Oracle>>,
) -> Result<RunResult, PipelineError> {
    let mut p = Pipeline::new(cfg.clone(), oracle)?;
    for f in frames {
        p.step(f)?;
    }
    p.finish()
}
