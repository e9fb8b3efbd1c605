//! Label bookkeeping: embeddings, confusion matrices, landmark label state
//! and proactive duplicate detection.

mod confusion;
mod embedding;

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_box, CameraIntrinsics, Pose, DEFAULT_Z_MIN};
use crate::graph::VariableKey;
use crate::map::Landmark;

pub use confusion::{confusion_likelihood, confusion_record, posterior_class_update, ClassPosterior, ConfusionMatrix};
pub use embedding::{
    cosine, embed_label, normalize_label, EmbeddingProvider, EmbeddingTransport, NgramEmbedding, TextProtocolEmbedding,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticsError {
    #[error("empty label")]
    EmptyLabel,
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("malformed embedding: {0}")]
    MalformedEmbedding(String),
    #[error("embedding unavailable: {0}")]
    EmbeddingUnavailable(String),
    #[error("malformed confusion matrix: {0}")]
    MalformedMatrix(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LandmarkStatus {
    /// Not yet reviewed by the oracle.
    Unverified,
    Empty,
    Incorrect,
    Refined,
    Correct,
    Duplicated,
    PreciseAmongDuplicated,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSemantics {
    label_set: Vec<String>,
    primary_label: String,
    pub status: LandmarkStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<BTreeMap<String, f64>>,
}

impl LandmarkSemantics {
    pub fn new(label: &str) -> Result<Self, SemanticsError> {
        if label.trim().is_empty() {
            return Err(SemanticsError::EmptyLabel);
        }
        Ok(Self {
            label_set: vec![label.to_string()],
            primary_label: label.to_string(),
            status: LandmarkStatus::Unverified,
            posterior: None,
        })
    }

    pub fn from_parts(labels: Vec<String>, primary: String, status: LandmarkStatus) -> Result<Self, SemanticsError> {
        if labels.iter().any(|l| l.trim().is_empty()) || primary.trim().is_empty() {
            return Err(SemanticsError::EmptyLabel);
        }
        let mut s = Self { label_set: Vec::new(), primary_label: primary.clone(), status, posterior: None };
        for l in labels {
            s.add_label(&l);
        }
        s.add_label(&primary);
        Ok(s)
    }

    pub fn labels(&self) -> &[String] {
        &self.label_set
    }

    pub fn primary_label(&self) -> &str {
        &self.primary_label
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.label_set.iter().any(|l| l == label)
    }

    /// Appends `label` if new; returns whether it was added.
    pub fn add_label(&mut self, label: &str) -> bool {
        if label.trim().is_empty() || self.has_label(label) {
            return false;
        }
        self.label_set.push(label.to_string());
        true
    }

    /// Replaces the primary label. The old primary is dropped from the set
    /// and the new one takes its position.
    pub fn relabel(&mut self, label: &str) -> Result<(), SemanticsError> {
        if label.trim().is_empty() {
            return Err(SemanticsError::EmptyLabel);
        }
        if label == self.primary_label {
            return Ok(());
        }
        if self.has_label(label) {
            self.label_set.retain(|l| l != &self.primary_label);
        } else if let Some(slot) = self.label_set.iter_mut().find(|l| **l == self.primary_label) {
            *slot = label.to_string();
        } else {
            self.label_set.push(label.to_string());
        }
        self.primary_label = label.to_string();
        Ok(())
    }

    /// Appends every label of `other` not already present.
    pub fn merge(&mut self, other: &LandmarkSemantics) {
        for l in &other.label_set {
            self.add_label(l);
        }
    }
}

/// Labels fed to the detector. Insert-only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDatabase {
    labels: IndexSet<String>,
}

impl LabelDatabase {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        Self { labels: labels.into_iter().map(Into::into).filter(|l: &String| !l.trim().is_empty()).collect() }
    }

    pub fn insert(&mut self, label: &str) -> bool {
        !label.trim().is_empty() && self.labels.insert(label.to_string())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains(label)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuplicateConfig {
    /// Projected boxes must overlap by strictly more than this IoU.
    pub iou: f64,
    /// World centers must be strictly closer than this (m).
    pub distance: f64,
}

impl Default for DuplicateConfig {
    fn default() -> Self {
        Self { iou: 0.9, distance: 0.1 }
    }
}

/// Pairs `(a, b)` with `a < b` whose projected boxes overlap beyond the IoU
/// threshold and whose centers are within the distance threshold.
pub fn find_duplicate_pairs<'a, I>(
    landmarks: I,
    pose: &Pose,
    k: &CameraIntrinsics,
    cfg: &DuplicateConfig,
) -> Vec<(VariableKey, VariableKey)>
where
    I: IntoIterator<Item = &'a Landmark>,
{
    let mut visible: Vec<(&Landmark, _)> = landmarks
        .into_iter()
        .filter_map(|l| project_box(k, pose, &l.position, &l.extent, DEFAULT_Z_MIN).map(|b| (l, b)))
        .collect();
    visible.sort_by_key(|(l, _)| l.key);
    let mut pairs = Vec::new();
    for (i, (a, ba)) in visible.iter().enumerate() {
        for (b, bb) in &visible[i + 1..] {
            if (a.position - b.position).norm() < cfg.distance && ba.iou(bb) > cfg.iou {
                pairs.push((a.key, b.key));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateResolution {
    pub survivor: VariableKey,
    pub removed: VariableKey,
}

/// Decides which member of each pair to drop using D evidence on primary
/// labels: `counts[precise][duplicate] > counts[duplicate][precise]`. Ties
/// and pairs touching an already-removed landmark are left alone. The caller
/// applies the returned resolutions.
pub fn resolve_duplicates(
    pairs: &[(VariableKey, VariableKey)],
    d: &ConfusionMatrix,
    landmarks: &BTreeMap<VariableKey, Landmark>,
) -> Vec<DuplicateResolution> {
    let mut removed = BTreeSet::new();
    let mut out = Vec::new();
    for &(a, b) in pairs {
        if removed.contains(&a) || removed.contains(&b) {
            continue;
        }
        let (Some(la), Some(lb)) = (landmarks.get(&a), landmarks.get(&b)) else {
            continue;
        };
        let (pa, pb) = (la.semantics.primary_label(), lb.semantics.primary_label());
        if pa == pb {
            continue;
        }
        let (ab, ba) = (d.count(pa, pb), d.count(pb, pa));
        let res = if ab > ba {
            DuplicateResolution { survivor: a, removed: b }
        } else if ba > ab {
            DuplicateResolution { survivor: b, removed: a }
        } else {
            continue;
        };
        removed.insert(res.removed);
        out.push(res);
    }
    out
}
