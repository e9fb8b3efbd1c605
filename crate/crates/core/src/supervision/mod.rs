//! Evaluator-driven map refinement: composites, prompts, response parsing
//! and feedback application.

mod composite;
mod oracle;
mod text;

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::VariableKey;
use crate::map::MapState;
use crate::semantics::LandmarkStatus;

pub use composite::{build_composite, CompositeSpec, OverlayEntry, DEFAULT_MAX_OVERLAYS};
pub use oracle::{HttpOracle, Oracle};
pub use text::{
    parse_class_label_gen, parse_landmark_eval, render_class_label_gen_prompt, render_class_label_gen_response,
    render_landmark_eval_prompt, render_landmark_eval_response,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SupervisionError {
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("{incorrect} incorrect tags but {corrected} corrections")]
    MisalignedCorrection { incorrect: usize, corrected: usize },
    #[error("tag {number} of frame {frame_id} no longer refers to a landmark")]
    StaleComposite { frame_id: u64, number: u32 },
    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalFeedback {
    pub empty: Vec<u32>,
    pub incorrect: Vec<u32>,
    pub corrected: Vec<String>,
    pub duplicated: Vec<Vec<u32>>,
    pub precise_in_duplicated: Vec<u32>,
}

impl EvalFeedback {
    /// Structural checks. A correction list without incorrect tags is
    /// tolerated (and ignored on application).
    pub fn validate(&self) -> Result<(), SupervisionError> {
        if !self.incorrect.is_empty() && self.corrected.len() != self.incorrect.len() {
            return Err(SupervisionError::MisalignedCorrection {
                incorrect: self.incorrect.len(),
                corrected: self.corrected.len(),
            });
        }
        if self.precise_in_duplicated.len() != self.duplicated.len() {
            return Err(SupervisionError::MalformedResponse(format!(
                "{} duplicate groups but {} precise tags",
                self.duplicated.len(),
                self.precise_in_duplicated.len()
            )));
        }
        for (g, p) in self.duplicated.iter().zip(&self.precise_in_duplicated) {
            if !g.contains(p) {
                return Err(SupervisionError::MalformedResponse(format!("precise tag {p} not in group {g:?}")));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.empty.is_empty() && self.incorrect.is_empty() && self.duplicated.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenFeedback {
    pub labels: BTreeMap<u32, Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemovalReason {
    Empty,
    Duplicate,
    ProactiveDuplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    M,
    D,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Edit {
    Removed { frame: u64, landmark: VariableKey, reason: RemovalReason, factors: usize },
    Relabeled { frame: u64, landmark: VariableKey, from: String, to: String },
    Merged { frame: u64, survivor: VariableKey, removed: VariableKey },
    MatrixUpdate { frame: u64, matrix: MatrixKind, reference: String, observed: String },
    LabelGenerated { frame: u64, landmark: VariableKey, label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub frame: u64,
    pub number: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditLog {
    pub edits: Vec<Edit>,
    pub skipped: Vec<Skip>,
}

impl EditLog {
    pub fn extend(&mut self, other: EditLog) {
        self.edits.extend(other.edits);
        self.skipped.extend(other.skipped);
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn removals(&self) -> usize {
        self.edits.iter().filter(|e| matches!(e, Edit::Removed { .. })).count()
    }
}

struct Applier<'a> {
    spec: &'a CompositeSpec,
    map: &'a mut MapState,
    log: EditLog,
}

impl Applier<'_> {
    fn frame(&self) -> u64 {
        self.spec.frame_id
    }

    /// Live landmark behind a display number, logging a skip otherwise.
    fn resolve(&mut self, number: u32) -> Option<VariableKey> {
        let key = self.spec.key_of(number).filter(|k| self.map.contains(*k));
        if key.is_none() {
            let err = SupervisionError::StaleComposite { frame_id: self.frame(), number };
            info!("feedback skipped: {err}");
            self.log.skipped.push(Skip { frame: self.frame(), number, reason: err.to_string() });
        }
        key
    }

    fn skip(&mut self, number: u32, reason: &str) {
        self.log.skipped.push(Skip { frame: self.frame(), number, reason: reason.to_string() });
    }

    fn remove(&mut self, key: VariableKey, reason: RemovalReason) {
        let factors = self.map.remove_landmark(key).expect("resolved landmark exists");
        self.log.edits.push(Edit::Removed { frame: self.frame(), landmark: key, reason, factors });
    }

    fn record(&mut self, matrix: MatrixKind, reference: &str, observed: &str) {
        let m = match matrix {
            MatrixKind::M => &mut self.map.m,
            MatrixKind::D => &mut self.map.d,
        };
        if m.record(reference, observed).is_ok() {
            self.log.edits.push(Edit::MatrixUpdate {
                frame: self.spec.frame_id,
                matrix,
                reference: reference.to_string(),
                observed: observed.to_string(),
            });
        }
    }
}

/// Applies one round of evaluator feedback to the map in the order
/// removals, corrections, duplicate merges, label generation. Entries that
/// no longer resolve to a landmark are skipped and logged. The caller
/// re-optimizes the graph afterwards.
pub fn apply_feedback(eval: &EvalFeedback, gen: &GenFeedback, spec: &CompositeSpec, map: &mut MapState) -> EditLog {
    let mut a = Applier { spec, map, log: EditLog::default() };

    let listed: BTreeSet<u32> =
        eval.empty.iter().chain(&eval.incorrect).chain(eval.duplicated.iter().flatten()).copied().collect();
    for o in &spec.overlays {
        if listed.contains(&o.number) {
            continue;
        }
        if let Some(lm) = a.map.landmarks.get_mut(&o.key) {
            if matches!(lm.semantics.status, LandmarkStatus::Unverified | LandmarkStatus::Refined) {
                lm.semantics.status = LandmarkStatus::Correct;
            }
        }
    }

    for &n in &eval.empty {
        if let Some(key) = a.resolve(n) {
            a.remove(key, RemovalReason::Empty);
        }
    }

    for (&n, corrected) in eval.incorrect.iter().zip(&eval.corrected) {
        let Some(key) = a.resolve(n) else { continue };
        let lm = a.map.landmarks.get_mut(&key).expect("resolved");
        let old = lm.semantics.primary_label().to_string();
        if old == *corrected {
            a.skip(n, "correction already applied");
            continue;
        }
        if lm.semantics.relabel(corrected).is_err() {
            a.skip(n, "empty correction");
            continue;
        }
        lm.semantics.status = LandmarkStatus::Refined;
        a.log.edits.push(Edit::Relabeled { frame: a.frame(), landmark: key, from: old.clone(), to: corrected.clone() });
        a.record(MatrixKind::M, corrected, &old);
    }

    for (group, &precise_n) in eval.duplicated.iter().zip(&eval.precise_in_duplicated) {
        let Some(precise) = a.resolve(precise_n) else { continue };
        let mut others = Vec::new();
        for &n in group.iter().filter(|n| **n != precise_n) {
            if let Some(k) = a.resolve(n) {
                if k != precise && !others.contains(&k) {
                    others.push(k);
                }
            }
        }
        if others.is_empty() {
            continue;
        }
        for other in others {
            let removed = a.map.landmarks[&other].semantics.clone();
            let precise_label = a.map.landmarks[&precise].semantics.primary_label().to_string();
            if removed.primary_label() != precise_label {
                a.record(MatrixKind::D, &precise_label, removed.primary_label());
            }
            let survivor = a.map.landmarks.get_mut(&precise).expect("resolved");
            survivor.semantics.merge(&removed);
            survivor.semantics.status = LandmarkStatus::PreciseAmongDuplicated;
            a.remove(other, RemovalReason::Duplicate);
            a.log.edits.push(Edit::Merged { frame: a.frame(), survivor: precise, removed: other });
        }
    }

    for (&n, labels) in &gen.labels {
        let Some(key) = a.resolve(n) else { continue };
        let status = a.map.landmarks[&key].semantics.status;
        if !matches!(
            status,
            LandmarkStatus::Correct | LandmarkStatus::PreciseAmongDuplicated | LandmarkStatus::Generated
        ) {
            a.skip(n, "labels generated for a landmark that is not confirmed correct");
            continue;
        }
        for label in labels {
            let in_db = a.map.label_db.insert(label);
            let lm = a.map.landmarks.get_mut(&key).expect("resolved");
            let added = lm.semantics.add_label(label);
            lm.semantics.status = LandmarkStatus::Generated;
            if added || in_db {
                a.log.edits.push(Edit::LabelGenerated { frame: a.frame(), landmark: key, label: label.clone() });
            }
        }
    }

    a.log
}
