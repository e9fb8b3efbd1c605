//! Map state shared by association, supervision and the pipeline: the
//! factor graph plus per-landmark semantics and the learned matrices.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::graph::{FactorGraph, GraphError, VariableKey};
use crate::semantics::{ConfusionMatrix, LabelDatabase, LandmarkSemantics};

pub const DEFAULT_EXTENT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub key: VariableKey,
    /// Mirror of the graph estimate, refreshed after every optimization.
    pub position: Vector3<f64>,
    pub extent: Vector3<f64>,
    pub semantics: LandmarkSemantics,
    pub created_frame: u64,
}

impl Landmark {
    pub fn new(
        key: VariableKey,
        position: Vector3<f64>,
        extent: Vector3<f64>,
        semantics: LandmarkSemantics,
        created_frame: u64,
    ) -> Self {
        Self { key, position, extent, semantics, created_frame }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MapState {
    pub graph: FactorGraph,
    pub landmarks: BTreeMap<VariableKey, Landmark>,
    /// Class refinement counts, `[refined][detected]`.
    pub m: ConfusionMatrix,
    /// Duplicate counts, `[precise][duplicate]`.
    pub d: ConfusionMatrix,
    pub label_db: LabelDatabase,
}

impl MapState {
    pub fn new(label_db: LabelDatabase) -> Self {
        Self { label_db, ..Self::default() }
    }

    pub fn add_landmark(
        &mut self,
        position: Vector3<f64>,
        extent: Vector3<f64>,
        semantics: LandmarkSemantics,
        frame: u64,
    ) -> Result<VariableKey, GraphError> {
        let key = self.graph.add_landmark(position)?;
        self.landmarks.insert(key, Landmark::new(key, position, extent, semantics, frame));
        Ok(key)
    }

    /// Removes the landmark variable, its factors and its semantics.
    /// Returns the number of factors removed.
    pub fn remove_landmark(&mut self, key: VariableKey) -> Result<usize, GraphError> {
        let n = self.graph.remove_landmark_factors(key)?;
        self.landmarks.remove(&key);
        Ok(n)
    }

    pub fn contains(&self, key: VariableKey) -> bool {
        self.landmarks.contains_key(&key)
    }

    pub fn sync_positions(&mut self) {
        let est = self.graph.estimate();
        for (key, lm) in &mut self.landmarks {
            if let Ok(p) = est.landmark(*key) {
                lm.position = *p;
            }
        }
    }

    pub fn observation_count(&self, key: VariableKey) -> usize {
        self.graph.observation_count(key)
    }
}
