use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{FactorGraph, GraphError, Ordering};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop when `(e_prev − e) / e_prev` falls below this.
    pub relative_tolerance: f64,
    /// Stop when the accepted update norm falls below this.
    pub step_tolerance: f64,
    pub lambda_initial: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_tolerance: 1e-8,
            step_tolerance: 1e-8,
            lambda_initial: 1e-4,
            lambda_factor: 10.0,
            lambda_max: 1e10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    RelativeDecrease,
    SmallStep,
    ZeroError,
    MaxIterations,
    /// Every damped step was rejected up to `lambda_max`.
    NoImprovement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub initial_error: f64,
    pub final_error: f64,
    pub termination: Termination,
}

impl FactorGraph {
    /// Levenberg–Marquardt on the tangent space. The graph's estimate is
    /// replaced by the solution.
    pub fn optimize(&mut self, cfg: &OptimizerConfig) -> Result<ConvergenceReport, GraphError> {
        self.check_constrained()?;
        let ordering = Ordering::new(self.estimate());
        let mut est = self.estimate().clone();
        let initial_error = self.total_error(&est)?;
        let mut error = initial_error;
        let mut lambda = cfg.lambda_initial;
        let mut iterations = 0;
        let mut termination = Termination::MaxIterations;

        'outer: while iterations < cfg.max_iterations {
            if error <= f64::MIN_POSITIVE {
                termination = Termination::ZeroError;
                break;
            }
            iterations += 1;
            let (h, g) = self.normal_equations(&est, &ordering)?;
            loop {
                let Some(delta) = damped_step(&h, &g, lambda) else {
                    lambda *= cfg.lambda_factor;
                    if lambda > cfg.lambda_max {
                        return Err(GraphError::SingularSystem);
                    }
                    continue;
                };
                let candidate = ordering.retract(&est, &delta);
                let new_error = self.total_error(&candidate)?;
                if new_error.is_finite() && new_error <= error {
                    let decrease = (error - new_error) / error;
                    est = candidate;
                    error = new_error;
                    lambda = (lambda / cfg.lambda_factor).max(1e-15);
                    if delta.norm() < cfg.step_tolerance {
                        termination = Termination::SmallStep;
                        break 'outer;
                    }
                    if decrease < cfg.relative_tolerance {
                        termination = Termination::RelativeDecrease;
                        break 'outer;
                    }
                    break;
                }
                lambda *= cfg.lambda_factor;
                if lambda > cfg.lambda_max {
                    termination = Termination::NoImprovement;
                    break 'outer;
                }
            }
        }

        self.set_estimate(est)?;
        Ok(ConvergenceReport { iterations, initial_error, final_error: error, termination })
    }
}

fn damped_step(h: &DMatrix<f64>, g: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut a = h.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let chol = a.cholesky()?;
    let mut step = chol.solve(g);
    step.neg_mut();
    step.iter().all(|x| x.is_finite()).then_some(step)
}
