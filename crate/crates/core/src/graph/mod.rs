//! Factor graph over SE(3) poses and 3-D landmarks.
//!
//! The MAP estimate is the minimizer of `Σ ½‖r_f‖²_Λf` over all factors,
//! found with Levenberg–Marquardt in [`optimize`]. Joint marginals for data
//! association come from the Gauss–Newton information matrix at the
//! solution ([`marginals`]).

mod factor;
pub mod marginals;
pub mod optimize;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

pub use factor::{Factor, FactorId, Linearization};
pub use marginals::{JointMarginal, Marginals};
pub use optimize::{ConvergenceReport, OptimizerConfig, Termination};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown variable {0}")]
    UnknownKey(VariableKey),
    #[error("variable {0} has the wrong kind for this operation")]
    WrongKind(VariableKey),
    #[error("unknown factor {0:?}")]
    UnknownFactor(FactorId),
    #[error("non-finite value")]
    NonFinite,
    #[error("covariance is not symmetric positive-definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("graph is underconstrained: {0}")]
    Underconstrained(String),
    #[error("normal equations are singular")]
    SingularSystem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariableKind {
    Pose,
    Landmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariableKey {
    pub kind: VariableKind,
    pub index: usize,
}

impl VariableKey {
    pub fn pose(index: usize) -> Self {
        Self { kind: VariableKind::Pose, index }
    }

    pub fn landmark(index: usize) -> Self {
        Self { kind: VariableKind::Landmark, index }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            VariableKind::Pose => 6,
            VariableKind::Landmark => 3,
        }
    }

    pub(crate) fn expect_pose(&self) -> Result<(), GraphError> {
        match self.kind {
            VariableKind::Pose => Ok(()),
            VariableKind::Landmark => Err(GraphError::WrongKind(*self)),
        }
    }

    pub(crate) fn expect_landmark(&self) -> Result<(), GraphError> {
        match self.kind {
            VariableKind::Landmark => Ok(()),
            VariableKind::Pose => Err(GraphError::WrongKind(*self)),
        }
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VariableKind::Pose => write!(f, "x{}", self.index),
            VariableKind::Landmark => write!(f, "l{}", self.index),
        }
    }
}

/// Gaussian noise on a factor residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseRepr", into = "NoiseRepr")]
pub struct NoiseModel {
    covariance: DMatrix<f64>,
    /// `L⁻¹` where `covariance = L Lᵀ`.
    whitener: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct NoiseRepr {
    covariance: DMatrix<f64>,
}

impl TryFrom<NoiseRepr> for NoiseModel {
    type Error = GraphError;
    fn try_from(r: NoiseRepr) -> Result<Self, GraphError> {
        NoiseModel::new(r.covariance)
    }
}

impl From<NoiseModel> for NoiseRepr {
    fn from(n: NoiseModel) -> Self {
        NoiseRepr { covariance: n.covariance }
    }
}

impl NoiseModel {
    pub fn new(covariance: DMatrix<f64>) -> Result<Self, GraphError> {
        if !covariance.is_square() || covariance.nrows() == 0 {
            return Err(GraphError::NotPositiveDefinite);
        }
        if !covariance.iter().all(|x| x.is_finite()) {
            return Err(GraphError::NonFinite);
        }
        if (&covariance - covariance.transpose()).abs().max() > 1e-12 {
            return Err(GraphError::NotPositiveDefinite);
        }
        let chol = covariance.clone().cholesky().ok_or(GraphError::NotPositiveDefinite)?;
        let l = chol.l();
        let n = l.nrows();
        let whitener = l.solve_lower_triangular(&DMatrix::identity(n, n)).ok_or(GraphError::NotPositiveDefinite)?;
        Ok(Self { covariance, whitener })
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self, GraphError> {
        Self::new(DMatrix::identity(dim, dim) * (sigma * sigma))
    }

    pub fn diagonal(sigmas: &[f64]) -> Result<Self, GraphError> {
        let v = DVector::from_iterator(sigmas.len(), sigmas.iter().map(|s| s * s));
        Self::new(DMatrix::from_diagonal(&v))
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        &self.whitener * r
    }

    pub fn whiten_matrix(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        &self.whitener * j
    }
}

/// Current values of every variable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphEstimate {
    pub poses: BTreeMap<usize, Pose>,
    pub landmarks: BTreeMap<usize, Vector3<f64>>,
}

impl GraphEstimate {
    pub fn pose(&self, key: VariableKey) -> Result<&Pose, GraphError> {
        key.expect_pose()?;
        self.poses.get(&key.index).ok_or(GraphError::UnknownKey(key))
    }

    pub fn landmark(&self, key: VariableKey) -> Result<&Vector3<f64>, GraphError> {
        key.expect_landmark()?;
        self.landmarks.get(&key.index).ok_or(GraphError::UnknownKey(key))
    }

    pub fn contains(&self, key: VariableKey) -> bool {
        match key.kind {
            VariableKind::Pose => self.poses.contains_key(&key.index),
            VariableKind::Landmark => self.landmarks.contains_key(&key.index),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = VariableKey> + '_ {
        self.poses.keys().map(|&i| VariableKey::pose(i)).chain(self.landmarks.keys().map(|&i| VariableKey::landmark(i)))
    }

    pub fn len(&self) -> usize {
        self.poses.len() + self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maps each variable to its offset in the stacked tangent vector. Poses
/// come first in key order, then landmarks.
#[derive(Debug, Clone)]
pub struct Ordering {
    offsets: BTreeMap<VariableKey, usize>,
    dim: usize,
}

impl Ordering {
    pub fn new(est: &GraphEstimate) -> Self {
        let mut offsets = BTreeMap::new();
        let mut dim = 0;
        for key in est.keys() {
            offsets.insert(key, dim);
            dim += key.dim();
        }
        Self { offsets, dim }
    }

    pub fn offset(&self, key: VariableKey) -> Result<usize, GraphError> {
        self.offsets.get(&key).copied().ok_or(GraphError::UnknownKey(key))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iter(&self) -> impl Iterator<Item = (VariableKey, usize)> + '_ {
        self.offsets.iter().map(|(k, o)| (*k, *o))
    }

    /// Applies a stacked update: poses by `x ∘ exp(δ)`, landmarks additively.
    pub fn retract(&self, est: &GraphEstimate, delta: &DVector<f64>) -> GraphEstimate {
        let mut out = est.clone();
        for (key, off) in self.iter() {
            match key.kind {
                VariableKind::Pose => {
                    let d = delta.fixed_rows::<6>(off).into_owned();
                    let p = out.poses.get_mut(&key.index).expect("ordering built from estimate");
                    *p = p.retract(&d);
                }
                VariableKind::Landmark => {
                    let d = delta.fixed_rows::<3>(off).into_owned();
                    *out.landmarks.get_mut(&key.index).expect("ordering built from estimate") += d;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum VariableValue {
    Pose(Pose),
    Landmark(Vector3<f64>),
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    estimate: GraphEstimate,
    factors: BTreeMap<FactorId, Factor>,
    next_pose: usize,
    next_landmark: usize,
    next_factor: u64,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, value: VariableValue) -> Result<VariableKey, GraphError> {
        match value {
            VariableValue::Pose(p) => self.add_pose(p),
            VariableValue::Landmark(l) => self.add_landmark(l),
        }
    }

    pub fn add_pose(&mut self, pose: Pose) -> Result<VariableKey, GraphError> {
        if !pose.is_finite() {
            return Err(GraphError::NonFinite);
        }
        let key = VariableKey::pose(self.next_pose);
        self.next_pose += 1;
        self.estimate.poses.insert(key.index, pose);
        Ok(key)
    }

    pub fn add_landmark(&mut self, position: Vector3<f64>) -> Result<VariableKey, GraphError> {
        if !position.iter().all(|x| x.is_finite()) {
            return Err(GraphError::NonFinite);
        }
        let key = VariableKey::landmark(self.next_landmark);
        self.next_landmark += 1;
        self.estimate.landmarks.insert(key.index, position);
        Ok(key)
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<FactorId, GraphError> {
        factor.validate()?;
        for key in factor.keys() {
            if !self.estimate.contains(key) {
                return Err(GraphError::UnknownKey(key));
            }
        }
        let id = FactorId(self.next_factor);
        self.next_factor += 1;
        self.factors.insert(id, factor);
        Ok(id)
    }

    pub fn remove_factor(&mut self, id: FactorId) -> Result<Factor, GraphError> {
        self.factors.remove(&id).ok_or(GraphError::UnknownFactor(id))
    }

    /// Deletes a landmark variable together with every factor that
    /// references it. Returns the number of factors removed.
    pub fn remove_landmark_factors(&mut self, key: VariableKey) -> Result<usize, GraphError> {
        key.expect_landmark()?;
        if self.estimate.landmarks.remove(&key.index).is_none() {
            return Err(GraphError::UnknownKey(key));
        }
        let before = self.factors.len();
        self.factors.retain(|_, f| !f.references(key));
        Ok(before - self.factors.len())
    }

    pub fn estimate(&self) -> &GraphEstimate {
        &self.estimate
    }

    pub fn set_estimate(&mut self, est: GraphEstimate) -> Result<(), GraphError> {
        let same_keys =
            est.poses.keys().eq(self.estimate.poses.keys()) && est.landmarks.keys().eq(self.estimate.landmarks.keys());
        if !same_keys {
            return Err(GraphError::DimensionMismatch { expected: self.estimate.len(), got: est.len() });
        }
        self.estimate = est;
        Ok(())
    }

    pub fn factors(&self) -> impl Iterator<Item = (FactorId, &Factor)> {
        self.factors.iter().map(|(id, f)| (*id, f))
    }

    pub fn factor(&self, id: FactorId) -> Option<&Factor> {
        self.factors.get(&id)
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn factors_referencing(&self, key: VariableKey) -> usize {
        self.factors.values().filter(|f| f.references(key)).count()
    }

    pub fn observation_count(&self, landmark: VariableKey) -> usize {
        self.factors.values().filter(|f| matches!(f, Factor::Observation { landmark: l, .. } if *l == landmark)).count()
    }

    pub fn contains(&self, key: VariableKey) -> bool {
        self.estimate.contains(key)
    }

    pub fn total_error(&self, est: &GraphEstimate) -> Result<f64, GraphError> {
        self.factors.values().map(|f| f.error(est)).sum()
    }

    pub fn current_error(&self) -> Result<f64, GraphError> {
        self.total_error(&self.estimate)
    }

    /// Gauss–Newton system `(JᵀJ, Jᵀr)` of the whitened residuals at `est`.
    pub fn normal_equations(
        &self,
        est: &GraphEstimate,
        ordering: &Ordering,
    ) -> Result<(DMatrix<f64>, DVector<f64>), GraphError> {
        let n = ordering.dim();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for f in self.factors.values() {
            let lin = f.linearize(est)?;
            let r = f.noise().whiten(&lin.residual);
            let blocks: Vec<(usize, DMatrix<f64>)> = lin
                .jacobians
                .iter()
                .map(|(k, j)| Ok((ordering.offset(*k)?, f.noise().whiten_matrix(j))))
                .collect::<Result<_, GraphError>>()?;
            for (oi, ji) in &blocks {
                let mut gi = g.rows_mut(*oi, ji.ncols());
                gi += ji.transpose() * &r;
                for (oj, jj) in &blocks {
                    let mut hij = h.view_mut((*oi, *oj), (ji.ncols(), jj.ncols()));
                    hij += ji.transpose() * jj;
                }
            }
        }
        Ok((h, g))
    }

    /// Information matrix `JᵀΛJ` at the current estimate.
    pub fn information_matrix(&self) -> Result<(DMatrix<f64>, Ordering), GraphError> {
        let ordering = Ordering::new(&self.estimate);
        let (h, _) = self.normal_equations(&self.estimate, &ordering)?;
        Ok((h, ordering))
    }

    pub(crate) fn check_constrained(&self) -> Result<(), GraphError> {
        if !self.factors.values().any(|f| matches!(f, Factor::PriorPose { .. })) {
            return Err(GraphError::Underconstrained("no PriorPose anchors the gauge".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in self.factors.values() {
            seen.extend(f.keys());
        }
        if let Some(k) = self.estimate.keys().find(|k| !seen.contains(k)) {
            return Err(GraphError::Underconstrained(format!("{k} has no factors")));
        }
        Ok(())
    }
}
