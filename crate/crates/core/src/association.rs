//! Measurement prediction, innovation covariance, chi-square gating and the
//! per-frame detection-to-landmark assignment.

use std::f64::consts::PI;

use log::warn;
use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::geometry::{skew, PixelBox, Pose};
use crate::graph::{JointMarginal, Marginals, NoiseModel, VariableKey};
use crate::map::MapState;
use crate::semantics::{cosine, EmbeddingProvider, SemanticsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("covariance is singular or not positive-definite")]
    SingularCovariance,
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("noise model must be {expected}-dimensional, got {got}")]
    NoiseDimension { expected: usize, got: usize },
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub pixel_box: PixelBox,
    pub point_cam: Vector3<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<Vector3<f64>>,
}

impl Detection {
    pub fn validate(&self) -> Result<(), AssociationError> {
        let bad = |m: &str| Err(AssociationError::InvalidDetection(m.to_string()));
        if self.label.trim().is_empty() {
            return bad("empty label");
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return bad("confidence outside [0, 1]");
        }
        let b = &self.pixel_box;
        if !(b.u_min <= b.u_max && b.v_min <= b.v_max) {
            return bad("box corners out of order");
        }
        if !self.point_cam.iter().all(|x| x.is_finite()) || self.point_cam.z <= 0.0 {
            return bad("point must be finite with z > 0");
        }
        if let Some(e) = self.extent {
            if !e.iter().all(|x| x.is_finite() && *x > 0.0) {
                return bad("extent must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    pub d: usize,
    pub alpha: f64,
    pub semantic_threshold: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self { d: 3, alpha: 0.95, semantic_threshold: 0.6 }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d < 1 {
            return Err("association.d must be ≥ 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err("association.alpha must lie in (0, 1)".into());
        }
        if !(-1.0..=1.0).contains(&self.semantic_threshold) {
            return Err("association.semantic_threshold must lie in [-1, 1]".into());
        }
        Ok(())
    }

    pub fn gate(&self) -> f64 {
        chi2_quantile(self.d, self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub detection: usize,
    pub landmark: VariableKey,
    pub d2: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    /// Every geometrically compatible landmark was taken by a closer detection.
    GeomFail,
    /// Geometrically compatible landmarks exist but none is semantically similar.
    SemFail,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationResult {
    pub assignments: Vec<Assignment>,
    pub new_landmarks: Vec<usize>,
    pub rejected: Vec<(usize, RejectReason)>,
}

impl AssociationResult {
    fn all_new(n: usize) -> Self {
        Self { new_landmarks: (0..n).collect(), ..Self::default() }
    }
}

/// Inverse CDF of the chi-square distribution with `d` degrees of freedom.
pub fn chi2_quantile(d: usize, alpha: f64) -> f64 {
    assert!(d >= 1, "degrees of freedom must be positive");
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    ChiSquared::new(d as f64).expect("positive degrees of freedom").inverse_cdf(alpha)
}

pub fn predict_measurement(pose: &Pose, landmark: &Vector3<f64>) -> Vector3<f64> {
    pose.transform_to_frame(landmark)
}

/// Jacobian of the prediction with respect to `[δω, δv, δl]` under the
/// right perturbation `pose ∘ exp(δ)`.
pub fn measurement_jacobian(pose: &Pose, landmark: &Vector3<f64>) -> SMatrix<f64, 3, 9> {
    let q = pose.transform_to_frame(landmark);
    let mut h = SMatrix::<f64, 3, 9>::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&q));
    h.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
    h.fixed_view_mut::<3, 3>(0, 6).copy_from(&pose.rotation.transpose());
    h
}

pub fn innovation_covariance(
    h: &SMatrix<f64, 3, 9>,
    sigma: &JointMarginal,
    gamma: &NoiseModel,
) -> Result<Matrix3<f64>, AssociationError> {
    if gamma.dim() != 3 {
        return Err(AssociationError::NoiseDimension { expected: 3, got: gamma.dim() });
    }
    let g = gamma.covariance();
    let g = Matrix3::from_fn(|i, j| g[(i, j)]);
    let c = h * sigma.matrix * h.transpose() + g;
    Ok((c + c.transpose()) * 0.5)
}

/// `rᵀ C⁻¹ r`.
pub fn mahalanobis_distance(r: &Vector3<f64>, c: &Matrix3<f64>) -> Result<f64, AssociationError> {
    let chol = c.cholesky().ok_or(AssociationError::SingularCovariance)?;
    let y = chol.l().solve_lower_triangular(r).ok_or(AssociationError::SingularCovariance)?;
    Ok(y.norm_squared())
}

/// Gaussian density of `r` under covariance `C`.
pub fn association_likelihood(r: &Vector3<f64>, c: &Matrix3<f64>) -> Result<f64, AssociationError> {
    let d2 = mahalanobis_distance(r, c)?;
    let det = c.determinant();
    if det <= 0.0 || !det.is_finite() {
        return Err(AssociationError::SingularCovariance);
    }
    Ok((-0.5 * d2).exp() / ((2.0 * PI).powi(3) * det).sqrt())
}

pub fn semantic_similarity(a: &str, b: &str, provider: &dyn EmbeddingProvider) -> Result<f64, AssociationError> {
    if a.trim().is_empty() || b.trim().is_empty() {
        return Err(SemanticsError::EmptyLabel.into());
    }
    if a == b {
        return Ok(1.0);
    }
    Ok(cosine(&provider.embed(a)?, &provider.embed(b)?))
}

/// Max similarity between `label` and any label in `set`.
pub fn label_set_similarity(
    label: &str,
    set: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<f64, AssociationError> {
    let mut best = f64::NEG_INFINITY;
    for l in set {
        best = best.max(semantic_similarity(label, l, provider)?);
        if best >= 1.0 {
            break;
        }
    }
    Ok(best)
}

/// Associates one frame's detections with the map. `pose` is the variable
/// of the current frame; `gamma` is the measurement noise. Marginals are
/// taken at the graph's current estimate.
pub fn associate_frame(
    detections: &[Detection],
    map: &MapState,
    pose: VariableKey,
    gamma: &NoiseModel,
    provider: &dyn EmbeddingProvider,
    cfg: &AssociationConfig,
) -> AssociationResult {
    if detections.is_empty() {
        return AssociationResult::default();
    }
    let keys: Vec<VariableKey> = map.landmarks.keys().copied().collect();
    if keys.is_empty() {
        return AssociationResult::all_new(detections.len());
    }
    let est = map.graph.estimate();
    let Ok(x) = est.pose(pose).copied() else {
        warn!("association: pose {pose} missing from the estimate");
        return AssociationResult::all_new(detections.len());
    };
    let joints = match Marginals::new(&map.graph).and_then(|m| m.pose_landmarks(pose, &keys)) {
        Ok(j) => j,
        Err(e) => {
            warn!("association: marginals unavailable ({e}); all detections start new landmarks");
            return AssociationResult::all_new(detections.len());
        }
    };

    // per landmark: prediction and innovation covariance
    let mut predicted = Vec::with_capacity(keys.len());
    for (key, joint) in keys.iter().zip(&joints) {
        let l = *est.landmark(*key).expect("landmark in map is in the estimate");
        let h = measurement_jacobian(&x, &l);
        let c = innovation_covariance(&h, joint, gamma).ok();
        predicted.push((predict_measurement(&x, &l), c));
    }

    let threshold = cfg.gate();
    let mut geometric = vec![false; detections.len()];
    let mut candidates = Vec::new();
    for (i, det) in detections.iter().enumerate() {
        for (j, key) in keys.iter().enumerate() {
            let (z_hat, Some(c)) = &predicted[j] else { continue };
            let Ok(d2) = mahalanobis_distance(&(z_hat - det.point_cam), c) else { continue };
            if d2 >= threshold {
                continue;
            }
            geometric[i] = true;
            let labels = map.landmarks[key].semantics.labels();
            let sim = match label_set_similarity(&det.label, labels, provider) {
                Ok(s) => s,
                Err(e) => {
                    warn!("association: similarity unavailable for {:?} ({e})", det.label);
                    continue;
                }
            };
            if sim >= cfg.semantic_threshold {
                candidates.push(Assignment { detection: i, landmark: *key, d2, similarity: sim });
            }
        }
    }
    candidates
        .sort_by(|a, b| a.d2.total_cmp(&b.d2).then(a.detection.cmp(&b.detection)).then(a.landmark.cmp(&b.landmark)));

    let mut result = AssociationResult::default();
    let mut det_done = vec![false; detections.len()];
    let mut lm_taken = std::collections::BTreeSet::new();
    let mut had_candidate = vec![false; detections.len()];
    for c in &candidates {
        had_candidate[c.detection] = true;
        if det_done[c.detection] || lm_taken.contains(&c.landmark) {
            continue;
        }
        det_done[c.detection] = true;
        lm_taken.insert(c.landmark);
        result.assignments.push(*c);
    }
    for i in 0..detections.len() {
        if det_done[i] {
            continue;
        }
        if !geometric[i] {
            result.new_landmarks.push(i);
        } else if had_candidate[i] {
            result.rejected.push((i, RejectReason::GeomFail));
        } else {
            result.rejected.push((i, RejectReason::SemFail));
        }
    }
    result.assignments.sort_by_key(|a| a.detection);
    result
}
