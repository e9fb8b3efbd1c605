use nalgebra::{Cholesky, DMatrix, Dyn, Matrix3, Matrix6, SMatrix};
use serde::{Deserialize, Serialize};

use super::{FactorGraph, GraphError, Ordering, VariableKey};

/// 9×9 covariance of a (pose, landmark) pair, pose tangent first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointMarginal {
    pub matrix: SMatrix<f64, 9, 9>,
}

impl JointMarginal {
    pub fn pose_block(&self) -> Matrix6<f64> {
        self.matrix.fixed_view::<6, 6>(0, 0).into_owned()
    }

    pub fn cross_block(&self) -> SMatrix<f64, 6, 3> {
        self.matrix.fixed_view::<6, 3>(0, 6).into_owned()
    }

    pub fn landmark_block(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(6, 6).into_owned()
    }
}

/// Factored information matrix at the current estimate, reusable across
/// many marginal queries.
pub struct Marginals {
    ordering: Ordering,
    chol: Cholesky<f64, Dyn>,
}

impl Marginals {
    pub fn new(graph: &FactorGraph) -> Result<Self, GraphError> {
        let (h, ordering) = graph.information_matrix()?;
        let chol = h.cholesky().ok_or(GraphError::SingularSystem)?;
        Ok(Self { ordering, chol })
    }

    /// Covariance block for an arbitrary set of variables, in the order given.
    pub fn joint(&self, keys: &[VariableKey]) -> Result<DMatrix<f64>, GraphError> {
        let n = self.ordering.dim();
        let mut offsets = Vec::with_capacity(keys.len());
        let mut width = 0;
        for k in keys {
            offsets.push((self.ordering.offset(*k)?, k.dim(), width));
            width += k.dim();
        }
        let mut basis = DMatrix::zeros(n, width);
        for &(off, dim, col) in &offsets {
            for i in 0..dim {
                basis[(off + i, col + i)] = 1.0;
            }
        }
        let cols = self.chol.solve(&basis);
        let mut out = DMatrix::zeros(width, width);
        for &(off, dim, row) in &offsets {
            out.view_mut((row, 0), (dim, width)).copy_from(&cols.view((off, 0), (dim, width)));
        }
        Ok((&out + out.transpose()) * 0.5)
    }

    pub fn covariance(&self, key: VariableKey) -> Result<DMatrix<f64>, GraphError> {
        self.joint(&[key])
    }

    /// Joint marginals of one pose with each of several landmarks, sharing
    /// the pose columns of a single solve.
    pub fn pose_landmarks(
        &self,
        pose: VariableKey,
        landmarks: &[VariableKey],
    ) -> Result<Vec<JointMarginal>, GraphError> {
        pose.expect_pose()?;
        let mut keys = Vec::with_capacity(landmarks.len() + 1);
        keys.push(pose);
        for l in landmarks {
            l.expect_landmark()?;
            keys.push(*l);
        }
        let n = self.ordering.dim();
        let width = 6 + 3 * landmarks.len();
        let mut basis = DMatrix::zeros(n, width);
        let mut offsets = Vec::with_capacity(keys.len());
        let mut col = 0;
        for k in &keys {
            let off = self.ordering.offset(*k)?;
            for i in 0..k.dim() {
                basis[(off + i, col + i)] = 1.0;
            }
            offsets.push((off, col));
            col += k.dim();
        }
        let cols = self.chol.solve(&basis);
        let (pose_off, _) = offsets[0];
        let mut out = Vec::with_capacity(landmarks.len());
        for &(lm_off, lm_col) in &offsets[1..] {
            let mut m = SMatrix::<f64, 9, 9>::zeros();
            m.fixed_view_mut::<6, 6>(0, 0).copy_from(&cols.view((pose_off, 0), (6, 6)));
            m.fixed_view_mut::<6, 3>(0, 6).copy_from(&cols.view((pose_off, lm_col), (6, 3)));
            m.fixed_view_mut::<3, 6>(6, 0).copy_from(&cols.view((lm_off, 0), (3, 6)));
            m.fixed_view_mut::<3, 3>(6, 6).copy_from(&cols.view((lm_off, lm_col), (3, 3)));
            out.push(JointMarginal { matrix: (m + m.transpose()) * 0.5 });
        }
        Ok(out)
    }

    pub fn pose_landmark(&self, pose: VariableKey, landmark: VariableKey) -> Result<JointMarginal, GraphError> {
        pose.expect_pose()?;
        landmark.expect_landmark()?;
        let m = self.joint(&[pose, landmark])?;
        Ok(JointMarginal { matrix: SMatrix::<f64, 9, 9>::from_iterator(m.iter().copied()) })
    }
}

impl FactorGraph {
    /// Joint covariance of a pose and a landmark from the inverse of the
    /// Gauss–Newton information matrix at the current estimate.
    pub fn joint_marginal_covariance(
        &self,
        pose: VariableKey,
        landmark: VariableKey,
    ) -> Result<JointMarginal, GraphError> {
        Marginals::new(self)?.pose_landmark(pose, landmark)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::graph::{Factor, NoiseModel};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, Vector3};

    #[test]
    fn single_pose_marginal_is_prior_covariance() {
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.01, 0.02, 0.03, 0.1, 0.2, 0.3]));
        let mut g = FactorGraph::new();
        let k = g.add_pose(Pose::identity()).unwrap();
        g.add_factor(Factor::PriorPose { key: k, mean: Pose::identity(), noise: NoiseModel::new(p.clone()).unwrap() })
            .unwrap();
        let cov = Marginals::new(&g).unwrap().covariance(k).unwrap();
        assert_relative_eq!(cov, p, epsilon = 1e-9);
    }

    #[test]
    fn joint_marginal_is_symmetric_psd() {
        let mut g = FactorGraph::new();
        let x = g.add_pose(Pose::identity()).unwrap();
        let l = g.add_landmark(Vector3::new(0.2, -0.1, 2.0)).unwrap();
        g.add_factor(Factor::PriorPose {
            key: x,
            mean: Pose::identity(),
            noise: NoiseModel::isotropic(6, 0.1).unwrap(),
        })
        .unwrap();
        g.add_factor(Factor::Observation {
            pose: x,
            landmark: l,
            measured: Vector3::new(0.2, -0.1, 2.0),
            noise: NoiseModel::isotropic(3, 0.2).unwrap(),
        })
        .unwrap();
        let j = g.joint_marginal_covariance(x, l).unwrap();
        assert!((j.matrix - j.matrix.transpose()).abs().max() < 1e-12);
        let eig = j.matrix.symmetric_eigenvalues();
        assert!(eig.min() >= -1e-9);
        assert!(matches!(g.joint_marginal_covariance(l, x), Err(GraphError::WrongKind(_))));
        let batch = Marginals::new(&g).unwrap().pose_landmarks(x, &[l]).unwrap();
        assert!((batch[0].matrix - j.matrix).abs().max() < 1e-12);
    }
}
