use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{GraphError, GraphEstimate, NoiseModel, VariableKey};
use crate::geometry::{se3_right_jacobian_inv, skew, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactorId(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Factor {
    /// Anchors a pose; residual `log(mean⁻¹ ∘ x)`.
    PriorPose { key: VariableKey, mean: Pose, noise: NoiseModel },
    /// Relative pose constraint; residual `log(relative⁻¹ ∘ x_a⁻¹ ∘ x_b)`.
    Between { a: VariableKey, b: VariableKey, relative: Pose, noise: NoiseModel },
    /// Landmark seen from a pose; residual `measured − x⁻¹ l`, sensor frame.
    Observation { pose: VariableKey, landmark: VariableKey, measured: Vector3<f64>, noise: NoiseModel },
}

/// Residual and per-variable Jacobians, not yet whitened.
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<(VariableKey, DMatrix<f64>)>,
}

impl Factor {
    pub fn keys(&self) -> Vec<VariableKey> {
        match self {
            Factor::PriorPose { key, .. } => vec![*key],
            Factor::Between { a, b, .. } => vec![*a, *b],
            Factor::Observation { pose, landmark, .. } => vec![*pose, *landmark],
        }
    }

    pub fn noise(&self) -> &NoiseModel {
        match self {
            Factor::PriorPose { noise, .. } | Factor::Between { noise, .. } | Factor::Observation { noise, .. } => {
                noise
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Factor::PriorPose { .. } | Factor::Between { .. } => 6,
            Factor::Observation { .. } => 3,
        }
    }

    pub fn references(&self, key: VariableKey) -> bool {
        self.keys().contains(&key)
    }

    pub(crate) fn validate(&self) -> Result<(), GraphError> {
        let expected = self.dim();
        if self.noise().dim() != expected {
            return Err(GraphError::DimensionMismatch { expected, got: self.noise().dim() });
        }
        match self {
            Factor::PriorPose { key, mean, .. } => {
                key.expect_pose()?;
                if !mean.is_finite() {
                    return Err(GraphError::NonFinite);
                }
            }
            Factor::Between { a, b, relative, .. } => {
                a.expect_pose()?;
                b.expect_pose()?;
                if !relative.is_finite() {
                    return Err(GraphError::NonFinite);
                }
            }
            Factor::Observation { pose, landmark, measured, .. } => {
                pose.expect_pose()?;
                landmark.expect_landmark()?;
                if !measured.iter().all(|x| x.is_finite()) {
                    return Err(GraphError::NonFinite);
                }
            }
        }
        Ok(())
    }

    pub fn residual(&self, est: &GraphEstimate) -> Result<DVector<f64>, GraphError> {
        Ok(match self {
            Factor::PriorPose { key, mean, .. } => {
                let x = est.pose(*key)?;
                DVector::from_column_slice(mean.inverse().compose(x).log_unchecked().to_vector().as_slice())
            }
            Factor::Between { a, b, relative, .. } => {
                let err = relative.inverse().compose(&est.pose(*a)?.inverse().compose(est.pose(*b)?));
                DVector::from_column_slice(err.log_unchecked().to_vector().as_slice())
            }
            Factor::Observation { pose, landmark, measured, .. } => {
                let predicted = est.pose(*pose)?.transform_to_frame(est.landmark(*landmark)?);
                DVector::from_column_slice((measured - predicted).as_slice())
            }
        })
    }

    /// Residual with analytic Jacobians under right-perturbation of poses
    /// and additive perturbation of landmarks.
    pub fn linearize(&self, est: &GraphEstimate) -> Result<Linearization, GraphError> {
        Ok(match self {
            Factor::PriorPose { key, mean, .. } => {
                let e = mean.inverse().compose(est.pose(*key)?).log_unchecked();
                let j = se3_right_jacobian_inv(&e);
                Linearization {
                    residual: DVector::from_column_slice(e.to_vector().as_slice()),
                    jacobians: vec![(*key, DMatrix::from_column_slice(6, 6, j.as_slice()))],
                }
            }
            Factor::Between { a, b, relative, .. } => {
                let t = est.pose(*a)?.inverse().compose(est.pose(*b)?);
                let e = relative.inverse().compose(&t).log_unchecked();
                let jr_inv = se3_right_jacobian_inv(&e);
                let ja = -(jr_inv * t.inverse().adjoint());
                Linearization {
                    residual: DVector::from_column_slice(e.to_vector().as_slice()),
                    jacobians: vec![
                        (*a, DMatrix::from_column_slice(6, 6, ja.as_slice())),
                        (*b, DMatrix::from_column_slice(6, 6, jr_inv.as_slice())),
                    ],
                }
            }
            Factor::Observation { pose, landmark, measured, .. } => {
                let x = est.pose(*pose)?;
                let q = x.transform_to_frame(est.landmark(*landmark)?);
                let mut jp = DMatrix::zeros(3, 6);
                jp.view_mut((0, 0), (3, 3)).copy_from(&(-skew(&q)));
                jp.view_mut((0, 3), (3, 3)).copy_from(&Matrix3::identity());
                let jl = -x.rotation.transpose();
                Linearization {
                    residual: DVector::from_column_slice((measured - q).as_slice()),
                    jacobians: vec![(*pose, jp), (*landmark, DMatrix::from_column_slice(3, 3, jl.as_slice()))],
                }
            }
        })
    }

    /// `½‖r‖²` in the metric of the factor's noise.
    pub fn error(&self, est: &GraphEstimate) -> Result<f64, GraphError> {
        let r = self.noise().whiten(&self.residual(est)?);
        Ok(0.5 * r.norm_squared())
    }
}
