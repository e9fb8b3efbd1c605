//! Trajectory and map metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{MapExport, TrajectoryRecord};
use crate::semantics::{cosine, normalize_label, EmbeddingProvider, NgramEmbedding};
use crate::simulator::{WorldGT, WorldObject};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectory lengths differ: {est} estimated vs {gt} ground truth")]
    LengthMismatch { est: usize, gt: usize },
    #[error("timestamps differ at row {row}: {est} vs {gt}")]
    TimestampMismatch { row: usize, est: f64, gt: f64 },
}

const TIMESTAMP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ApeStats {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

/// Per-frame translational error statistics, no alignment.
pub fn ape(est: &[TrajectoryRecord], gt: &[TrajectoryRecord]) -> Result<ApeStats, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    for (row, (a, b)) in est.iter().zip(gt).enumerate() {
        if (a.t - b.t).abs() > TIMESTAMP_TOLERANCE {
            return Err(EvalError::TimestampMismatch { row, est: a.t, gt: b.t });
        }
    }
    let errors: Vec<f64> = est.iter().zip(gt).map(|(a, b)| (a.translation - b.translation).norm()).collect();
    Ok(error_stats(&errors))
}

pub fn error_stats(errors: &[f64]) -> ApeStats {
    if errors.is_empty() {
        return ApeStats::default();
    }
    let n = errors.len() as f64;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 { 0.5 * (sorted[mid - 1] + sorted[mid]) } else { sorted[mid] };
    ApeStats {
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: errors.iter().sum::<f64>() / n,
        median,
        max: sorted[sorted.len() - 1],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SemanticRule {
    /// Some label contains the ground-truth category as a whole-word sequence.
    ExactCategory,
    /// Some label's embedding similarity to the category is at least `tau`.
    Embedding { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub distance: f64,
    pub semantic: SemanticRule,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { distance: 0.3, semantic: SemanticRule::ExactCategory }
    }
}

fn tokens(s: &str) -> Vec<String> {
    normalize_label(s).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

pub fn shares_category(label: &str, category: &str) -> bool {
    let l = tokens(label);
    let c = tokens(category);
    !c.is_empty() && l.windows(c.len()).any(|w| w == c.as_slice())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub est_count: usize,
    pub true_pos: usize,
    pub false_pos: usize,
    pub gt_count: usize,
}

impl PrfReport {
    pub fn from_counts(est_count: usize, true_pos: usize, gt_count: usize) -> Self {
        let precision = if est_count == 0 { 0.0 } else { true_pos as f64 / est_count as f64 };
        let recall = if gt_count == 0 { 0.0 } else { true_pos as f64 / gt_count as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1, est_count, true_pos, false_pos: est_count - true_pos, gt_count }
    }
}

/// Objects present at the end of the run.
fn final_objects(world: &WorldGT) -> Vec<&WorldObject> {
    world.objects.iter().filter(|o| o.active_until.is_none()).collect()
}

/// Greedy one-to-one matching of map landmarks to the world's final objects
/// by ascending distance, subject to the distance threshold and semantic
/// rule.
pub fn landmark_prf(map: &MapExport, world: &WorldGT, cfg: &MatchConfig) -> PrfReport {
    let objects = final_objects(world);
    let embedder = NgramEmbedding::default();
    let semantic_ok = |labels: &[String], obj: &WorldObject| match cfg.semantic {
        SemanticRule::ExactCategory => labels.iter().any(|l| shares_category(l, &obj.category)),
        SemanticRule::Embedding { tau } => {
            labels.iter().any(|l| match (embedder.embed(l), embedder.embed(&obj.category)) {
                (Ok(a), Ok(b)) => cosine(&a, &b) >= tau,
                _ => false,
            })
        }
    };
    let mut candidates = Vec::new();
    for (li, l) in map.landmarks.iter().enumerate() {
        for (oi, o) in objects.iter().enumerate() {
            let d = (l.position - o.position).norm();
            if d <= cfg.distance && semantic_ok(&l.labels, o) {
                candidates.push((d, l.id, o.id, li, oi));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_l = vec![false; map.landmarks.len()];
    let mut used_o = vec![false; objects.len()];
    let mut tp = 0;
    for (_, _, _, li, oi) in candidates {
        if !used_l[li] && !used_o[oi] {
            used_l[li] = true;
            used_o[oi] = true;
            tp += 1;
        }
    }
    PrfReport::from_counts(map.landmarks.len(), tp, objects.len())
}
