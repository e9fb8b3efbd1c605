//! Independent oracles and scenario checks shared by the integration tests
//! and the acceptance report. Each `check_*` returns a one-line summary on
//! success and a diagnostic on failure.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use semslam::association::{chi2_quantile, innovation_covariance, mahalanobis_distance, measurement_jacobian};
use semslam::eval::{ape, landmark_prf, MatchConfig, PrfReport};
use semslam::geometry::{CameraIntrinsics, Pose, Twist};
use semslam::graph::{
    Factor, FactorGraph, GraphEstimate, JointMarginal, NoiseModel, OptimizerConfig, VariableKey, VariableKind,
};
use semslam::io::{LandmarkExport, MapExport, TrajectoryRecord};
use semslam::map::MapState;
use semslam::pipeline::{resolve_proactive_duplicates, run, PipelineConfig, RunResult};
use semslam::semantics::{
    posterior_class_update, ConfusionMatrix, DuplicateConfig, LabelDatabase, LandmarkSemantics, LandmarkStatus,
};
use semslam::simulator::{removal_event, simulate, ScriptedOracle, SimConfig, SimDataset, WorldGT, WorldObject};
use semslam::supervision::{
    apply_feedback, build_composite, parse_class_label_gen, parse_landmark_eval, render_class_label_gen_response,
    render_landmark_eval_response, EditLog, EvalFeedback, GenFeedback, Oracle,
};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<const N: usize>(rng: &mut ChaCha8Rng, scale: f64) -> SVector<f64, N> {
    SVector::<f64, N>::from_fn(|_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
    Pose::exp(&Twist::new(normal::<3>(rng, rot), normal::<3>(rng, trans)))
}

/// Random symmetric positive-definite matrix with entries of order `scale²`.
pub fn random_spd<const N: usize>(rng: &mut ChaCha8Rng, scale: f64) -> SMatrix<f64, N, N> {
    let a = SMatrix::<f64, N, N>::from_fn(|_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let m = a * a.transpose() + SMatrix::<f64, N, N>::identity() * (0.2 * scale * scale);
    (m + m.transpose()) * 0.5
}

pub fn to_dmatrix<const N: usize>(m: &SMatrix<f64, N, N>) -> DMatrix<f64> {
    DMatrix::from_fn(N, N, |i, j| m[(i, j)])
}

/// Gaussian sample `L n` for a lower Cholesky factor `L`.
pub fn sample_with<const N: usize>(rng: &mut ChaCha8Rng, l: &SMatrix<f64, N, N>) -> SVector<f64, N> {
    l * normal::<N>(rng, 1.0)
}

pub fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    a.inverse().compose(b).log_unchecked().to_vector().norm()
}

// ---------------------------------------------------------------- graphs

pub fn perturb(est: &GraphEstimate, key: VariableKey, delta: &DVector<f64>) -> GraphEstimate {
    let mut out = est.clone();
    match key.kind {
        VariableKind::Pose => {
            let p = out.poses.get_mut(&key.index).unwrap();
            *p = p.compose(&Pose::exp(&Twist::new(
                Vector3::new(delta[0], delta[1], delta[2]),
                Vector3::new(delta[3], delta[4], delta[5]),
            )));
        }
        VariableKind::Landmark => {
            *out.landmarks.get_mut(&key.index).unwrap() += Vector3::new(delta[0], delta[1], delta[2]);
        }
    }
    out
}

/// Central-difference Jacobian of a factor residual with respect to one
/// variable.
pub fn fd_jacobian(f: &Factor, est: &GraphEstimate, key: VariableKey, h: f64) -> DMatrix<f64> {
    let n = key.dim();
    let mut j = DMatrix::zeros(f.dim(), n);
    for c in 0..n {
        let mut d = DVector::zeros(n);
        d[c] = h;
        let plus = f.residual(&perturb(est, key, &d)).unwrap();
        let minus = f.residual(&perturb(est, key, &(-d))).unwrap();
        j.set_column(c, &((plus - minus) / (2.0 * h)));
    }
    j
}

pub struct RandomGraph {
    pub graph: FactorGraph,
    pub truth: GraphEstimate,
}

fn noise_from(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> NoiseModel {
    let cov =
        if dim == 6 { to_dmatrix(&random_spd::<6>(rng, scale)) } else { to_dmatrix(&random_spd::<3>(rng, scale)) };
    NoiseModel::new(cov).unwrap()
}

fn sample_noise(rng: &mut ChaCha8Rng, noise: &NoiseModel) -> DVector<f64> {
    let l = noise.covariance().clone().cholesky().unwrap().l();
    let n = DVector::from_fn(noise.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    l * n
}

/// Pose chain with a prior, odometry between consecutive poses and each
/// landmark observed from up to three poses. With `noisy`, measurements are
/// drawn from their noise models; the initial estimate is always perturbed.
pub fn random_graph(rng: &mut ChaCha8Rng, n_poses: usize, n_landmarks: usize, noisy: bool) -> RandomGraph {
    let mut graph = FactorGraph::new();
    let mut truth = GraphEstimate::default();
    let mut pose = random_pose(rng, 0.5, 1.0);
    let mut pose_keys = Vec::new();
    for i in 0..n_poses {
        if i > 0 {
            pose = pose.compose(&random_pose(rng, 0.2, 0.5));
        }
        let k = graph.add_pose(pose).unwrap();
        truth.poses.insert(k.index, pose);
        pose_keys.push(k);
    }
    let noise = noise_from(rng, 6, 0.01);
    let mean = if noisy {
        truth.poses[&0].compose(&Pose::exp(&Twist::from_vector(&sample_noise(rng, &noise).fixed_rows::<6>(0).into())))
    } else {
        truth.poses[&0]
    };
    graph.add_factor(Factor::PriorPose { key: pose_keys[0], mean, noise }).unwrap();
    for w in pose_keys.windows(2) {
        let noise = noise_from(rng, 6, 0.03);
        let mut relative = truth.poses[&w[0].index].inverse().compose(&truth.poses[&w[1].index]);
        if noisy {
            relative =
                relative.compose(&Pose::exp(&Twist::from_vector(&sample_noise(rng, &noise).fixed_rows::<6>(0).into())));
        }
        graph.add_factor(Factor::Between { a: w[0], b: w[1], relative, noise }).unwrap();
    }
    for _ in 0..n_landmarks {
        let anchor = pose_keys[rng.random_range(0..n_poses)];
        let local = Vector3::new(0.0, 0.0, 2.0) + normal::<3>(rng, 0.5);
        let position = truth.poses[&anchor.index].transform_from_frame(&local);
        let key = graph.add_landmark(position).unwrap();
        truth.landmarks.insert(key.index, position);
        let mut observers = pose_keys.clone();
        for _ in 0..n_poses.min(3) {
            let p = observers.remove(rng.random_range(0..observers.len()));
            let noise = noise_from(rng, 3, 0.05);
            let mut measured = truth.poses[&p.index].transform_to_frame(&position);
            if noisy {
                measured += sample_noise(rng, &noise).fixed_rows::<3>(0);
            }
            graph.add_factor(Factor::Observation { pose: p, landmark: key, measured, noise }).unwrap();
        }
    }
    let mut init = truth.clone();
    for p in init.poses.values_mut() {
        *p = p.compose(&random_pose(rng, 0.05, 0.1));
    }
    for l in init.landmarks.values_mut() {
        *l += normal::<3>(rng, 0.1);
    }
    graph.set_estimate(init).unwrap();
    RandomGraph { graph, truth }
}

fn keys_of(est: &GraphEstimate) -> Vec<VariableKey> {
    est.poses
        .keys()
        .map(|i| VariableKey::pose(*i))
        .chain(est.landmarks.keys().map(|i| VariableKey::landmark(*i)))
        .collect()
}

/// Stacked residual whitened with an explicit Cholesky factor of each
/// factor covariance.
pub fn whitened_residual(graph: &FactorGraph, est: &GraphEstimate) -> DVector<f64> {
    let mut parts: Vec<f64> = Vec::new();
    for (_, f) in graph.factors() {
        let r = f.residual(est).unwrap();
        let l = f.noise().covariance().clone().cholesky().unwrap().l();
        let w = l.solve_lower_triangular(&r).unwrap();
        parts.extend(w.iter());
    }
    DVector::from_vec(parts)
}

fn stacked_perturb(est: &GraphEstimate, keys: &[VariableKey], delta: &DVector<f64>) -> GraphEstimate {
    let mut out = est.clone();
    let mut off = 0;
    for k in keys {
        let d = delta.rows(off, k.dim()).into_owned();
        out = perturb(&out, *k, &d);
        off += k.dim();
    }
    out
}

pub fn fd_stacked_jacobian(graph: &FactorGraph, est: &GraphEstimate, h: f64) -> DMatrix<f64> {
    let keys = keys_of(est);
    let n: usize = keys.iter().map(|k| k.dim()).sum();
    let m = whitened_residual(graph, est).len();
    let mut j = DMatrix::zeros(m, n);
    for c in 0..n {
        let mut d = DVector::zeros(n);
        d[c] = h;
        let plus = whitened_residual(graph, &stacked_perturb(est, &keys, &d));
        let minus = whitened_residual(graph, &stacked_perturb(est, &keys, &(-d)));
        j.set_column(c, &((plus - minus) / (2.0 * h)));
    }
    j
}

/// Undamped Gauss–Newton with finite-difference Jacobians and an LU solve.
pub fn dense_gauss_newton(graph: &FactorGraph, iterations: usize) -> GraphEstimate {
    let mut est = graph.estimate().clone();
    let keys = keys_of(&est);
    for _ in 0..iterations {
        let j = fd_stacked_jacobian(graph, &est, 1e-6);
        let r = whitened_residual(graph, &est);
        let step = (j.transpose() * &j).lu().solve(&(-(j.transpose() * r))).unwrap();
        est = stacked_perturb(&est, &keys, &step);
        if step.norm() < 1e-13 {
            break;
        }
    }
    est
}

pub fn max_estimate_difference(a: &GraphEstimate, b: &GraphEstimate) -> f64 {
    let p = a.poses.iter().map(|(i, p)| pose_distance(p, &b.poses[i])).fold(0.0, f64::max);
    let l = a.landmarks.iter().map(|(i, l)| (l - b.landmarks[i]).norm()).fold(0.0, f64::max);
    p.max(l)
}

pub fn tight_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        max_iterations: 500,
        relative_tolerance: 1e-16,
        step_tolerance: 1e-13,
        ..OptimizerConfig::default()
    }
}

/// Analytic factor Jacobians against central differences.
pub fn check_factor_jacobians(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    let mut blocks = 0;
    for _ in 0..instances {
        let g = random_graph(&mut rng, 3, 2, true);
        let est = g.graph.estimate();
        for (_, f) in g.graph.factors() {
            let lin = f.linearize(est).unwrap();
            for (key, analytic) in &lin.jacobians {
                let numeric = fd_jacobian(f, est, *key, 1e-6);
                let scale = analytic.amax().max(1.0);
                worst = worst.max((analytic - numeric).amax() / scale);
                blocks += 1;
            }
        }
    }
    if worst <= 1e-5 {
        Ok(format!("{blocks} Jacobian blocks, worst deviation {worst:.2e}"))
    } else {
        Err(format!("worst Jacobian deviation {worst:.2e} > 1e-5"))
    }
}

pub fn check_noise_free_recovery(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let mut g = random_graph(&mut rng, 6, 4, false);
        g.graph.optimize(&tight_optimizer()).map_err(|e| e.to_string())?;
        worst = worst.max(max_estimate_difference(g.graph.estimate(), &g.truth));
    }
    if worst <= 1e-8 {
        Ok(format!("{instances} noise-free graphs, worst error {worst:.2e}"))
    } else {
        Err(format!("noise-free recovery error {worst:.2e} > 1e-8"))
    }
}

pub fn check_lm_against_gauss_newton(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let mut g = random_graph(&mut rng, 5, 5, true);
        let oracle = dense_gauss_newton(&g.graph, 50);
        g.graph.optimize(&tight_optimizer()).map_err(|e| e.to_string())?;
        worst = worst.max(max_estimate_difference(g.graph.estimate(), &oracle));
    }
    if worst <= 1e-6 {
        Ok(format!("{instances} random 10-variable graphs, worst deviation {worst:.2e}"))
    } else {
        Err(format!("LM deviates from Gauss-Newton by {worst:.2e} > 1e-6"))
    }
}

/// Joint marginals against a dense LU inverse of the information matrix.
pub fn check_marginals(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n_poses = rng.random_range(2..=15);
        let n_landmarks = rng.random_range(1..=(30 - n_poses).min(15));
        let mut g = random_graph(&mut rng, n_poses, n_landmarks, true);
        g.graph.optimize(&OptimizerConfig::default()).map_err(|e| e.to_string())?;
        let (h, ordering) = g.graph.information_matrix().map_err(|e| e.to_string())?;
        let inv = h.clone().lu().try_inverse().ok_or("information matrix not invertible")?;
        for _ in 0..5 {
            let p = VariableKey::pose(rng.random_range(0..n_poses));
            let l = VariableKey::landmark(rng.random_range(0..n_landmarks));
            let jm = g.graph.joint_marginal_covariance(p, l).map_err(|e| e.to_string())?;
            let idx: Vec<usize> = (0..6)
                .map(|i| ordering.offset(p).unwrap() + i)
                .chain((0..3).map(|i| ordering.offset(l).unwrap() + i))
                .collect();
            let dense = SMatrix::<f64, 9, 9>::from_fn(|i, j| inv[(idx[i], idx[j])]);
            worst = worst.max((jm.matrix - dense).amax());
        }
    }
    if worst <= 1e-8 {
        Ok(format!("{instances} graphs of at most 30 variables, worst deviation {worst:.2e}"))
    } else {
        Err(format!("marginal deviation {worst:.2e} > 1e-8"))
    }
}

// ---------------------------------------------------------------- association

/// Critical value for 3 degrees of freedom at 0.95 from standard tables.
pub const CHI2_3_095: f64 = 7.814727903251178;

fn fd_measurement_jacobian(pose: &Pose, l: &Vector3<f64>) -> SMatrix<f64, 3, 9> {
    let h = 1e-6;
    SMatrix::<f64, 3, 9>::from_fn(|r, c| {
        let eval = |s: f64| {
            let mut d = SVector::<f64, 9>::zeros();
            d[c] = s;
            let p =
                pose.compose(&Pose::exp(&Twist::new(Vector3::new(d[0], d[1], d[2]), Vector3::new(d[3], d[4], d[5]))));
            p.transform_to_frame(&(l + Vector3::new(d[6], d[7], d[8])))[r]
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    })
}

pub struct GateInstance {
    pub pose: Pose,
    pub landmark: Vector3<f64>,
    pub sigma: SMatrix<f64, 9, 9>,
    pub gamma: Matrix3<f64>,
}

pub fn random_gate_instance(rng: &mut ChaCha8Rng, scale: f64) -> GateInstance {
    let pose = random_pose(rng, 1.0, 2.0);
    let landmark = pose.transform_from_frame(&(Vector3::new(0.0, 0.0, 2.5) + normal::<3>(rng, 0.7)));
    GateInstance { pose, landmark, sigma: random_spd::<9>(rng, scale), gamma: random_spd::<3>(rng, scale) }
}

/// Library gate decision against thresholding the Gaussian density at the
/// equivalent cutoff, both computed from scratch.
pub fn check_gate_equivalence(instances: usize, seed: u64) -> Check {
    let q = chi2_quantile(3, 0.95);
    if (q - 7.8147).abs() > 1e-3 {
        return Err(format!("chi2_quantile(3, 0.95) = {q}"));
    }
    let mut rng = rng(seed);
    let mut agree = 0;
    let mut passes = 0;
    for _ in 0..instances {
        let inst = random_gate_instance(&mut rng, 0.08);
        let predicted = inst.pose.transform_to_frame(&inst.landmark);
        // oracle covariance from a numeric Jacobian
        let hn = fd_measurement_jacobian(&inst.pose, &inst.landmark);
        let c_oracle = hn * inst.sigma * hn.transpose() + inst.gamma;
        let spread = rng.random_range(0.3..2.5);
        let chol = c_oracle.cholesky().unwrap().l();
        let z = predicted + spread * sample_with(&mut rng, &chol);
        let r = z - predicted;

        let h = measurement_jacobian(&inst.pose, &inst.landmark);
        let gamma = NoiseModel::new(to_dmatrix(&inst.gamma)).unwrap();
        let c = innovation_covariance(&h, &JointMarginal { matrix: inst.sigma }, &gamma).unwrap();
        let gate_pass = mahalanobis_distance(&r, &c).unwrap() < q;

        let inv = c_oracle.try_inverse().unwrap();
        let norm = ((2.0 * std::f64::consts::PI).powi(3) * c_oracle.determinant()).sqrt();
        let density = (-0.5 * (r.transpose() * inv * r)[0]).exp() / norm;
        let cutoff = (-0.5 * CHI2_3_095).exp() / norm;
        let likelihood_pass = density > cutoff;
        agree += usize::from(gate_pass == likelihood_pass);
        passes += usize::from(gate_pass);
    }
    if agree == instances {
        Ok(format!("{agree}/{instances} agree ({passes} inside the gate), chi2(3, 0.95) = {q:.4}"))
    } else {
        Err(format!("{agree}/{instances} gate decisions agree"))
    }
}

/// Innovation covariance against the sample covariance of simulated
/// measurements under joint state and sensor noise.
pub fn check_innovation_monte_carlo(instances: usize, samples: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let inst = random_gate_instance(&mut rng, 0.02);
        let h = measurement_jacobian(&inst.pose, &inst.landmark);
        let gamma = NoiseModel::new(to_dmatrix(&inst.gamma)).unwrap();
        let c = innovation_covariance(&h, &JointMarginal { matrix: inst.sigma }, &gamma).unwrap();
        let ls = inst.sigma.cholesky().unwrap().l();
        let lg = inst.gamma.cholesky().unwrap().l();
        let mut sum = Vector3::zeros();
        let mut outer = Matrix3::zeros();
        for _ in 0..samples {
            let d = sample_with(&mut rng, &ls);
            let p =
                inst.pose.compose(&Pose::exp(&Twist::new(d.fixed_rows::<3>(0).into(), d.fixed_rows::<3>(3).into())));
            let l = inst.landmark + d.fixed_rows::<3>(6);
            let z = p.transform_to_frame(&l) + sample_with(&mut rng, &lg);
            sum += z;
            outer += z * z.transpose();
        }
        let n = samples as f64;
        let mean = sum / n;
        let emp = (outer - mean * mean.transpose() * n) / (n - 1.0);
        worst = worst.max((emp - c).norm() / c.norm());
    }
    if worst <= 0.05 {
        Ok(format!("{instances} instances x {samples} samples, worst relative Frobenius error {:.2}%", 100.0 * worst))
    } else {
        Err(format!("relative Frobenius error {:.2}% > 5%", 100.0 * worst))
    }
}

// ---------------------------------------------------------------- semantics

/// Exhaustive Bayes over every class in the matrix.
pub fn bayes_oracle(
    detected: &str,
    confidence: f64,
    labels: &[String],
    counts: &[Vec<u64>],
    kappa: f64,
) -> (String, BTreeMap<String, f64>) {
    let n = labels.len();
    let Some(d) = labels.iter().position(|l| l == detected).filter(|_| n >= 2) else {
        return (detected.to_string(), BTreeMap::from([(detected.to_string(), 1.0)]));
    };
    let joint: Vec<f64> = (0..n)
        .map(|c| {
            let prior = if c == d { confidence } else { (1.0 - confidence) / (n as f64 - 1.0) };
            let row: u64 = counts[c].iter().sum();
            prior * (counts[c][d] as f64 + kappa) / (row as f64 + kappa * n as f64)
        })
        .collect();
    let evidence: f64 = joint.iter().sum();
    let post: Vec<f64> = joint.iter().map(|j| j / evidence).collect();
    let max = post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied = |c: usize| max - post[c] <= 1e-12 * max;
    let best = if tied(d) { d } else { (0..n).find(|c| tied(*c)).unwrap() };
    let map = labels.iter().cloned().zip(post).collect();
    (labels[best].clone(), map)
}

pub fn check_bayes(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    let mut ties = 0;
    for i in 0..instances {
        let n = rng.random_range(1..=5);
        let labels: Vec<String> = (0..n).map(|k| format!("class {k}")).collect();
        let tie_case = i % 10 == 0;
        let counts: Vec<Vec<u64>> =
            (0..n).map(|_| (0..n).map(|_| if tie_case { 0 } else { rng.random_range(0..12) }).collect()).collect();
        let kappa = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let detected = labels[rng.random_range(0..n)].clone();
        let confidence = match i % 25 {
            _ if tie_case => 1.0 / n as f64,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        };
        let m = ConfusionMatrix::from_counts(labels.clone(), counts.clone(), kappa).map_err(|e| e.to_string())?;
        let got = posterior_class_update(&detected, confidence, &m);
        let (label, post) = bayes_oracle(&detected, confidence, &labels, &counts, kappa);
        if got.label != label {
            return Err(format!(
                "instance {i}: label {} vs oracle {label} (detected {detected}, confidence {confidence}, counts {counts:?}, kappa {kappa}, posterior {:?} vs {post:?})",
                got.label, got.posterior
            ));
        }
        if tie_case && n >= 2 {
            ties += 1;
            if got.label != detected {
                return Err(format!("instance {i}: tie did not keep the detected label"));
            }
        }
        for (l, p) in &post {
            worst = worst.max((got.probability(l) - p).abs());
        }
        let total: f64 = got.posterior.values().sum();
        worst = worst.max((total - 1.0).abs());
    }
    if worst <= 1e-12 {
        Ok(format!("{instances} instances ({ties} ties at confidence 1/N), worst deviation {worst:.1e}"))
    } else {
        Err(format!("posterior deviation {worst:.2e} > 1e-12"))
    }
}

// ---------------------------------------------------------------- parsing

pub const WORKED_EXAMPLE: &str = "\
Step 4. Provide lists, <empty | incorrect | corrected | duplicated | precise_tags_in_duplicated>_tags =[], results from Steps 1 and 3. [] if No tag.
   example 1:
   empty_tags = [1]
   incorrect_tags = [4, 11]
   corrected_tags = ['<object name>', '<object name>']
   duplicated_tags = [(6, 7, 8), ()]
   precise_tags_in_duplicated = [7]
";

pub const TRANSCRIPT: &str = "\
[14] is empty. [6, 7] are visually targeting the same object. [6] teacup is more precise.
incorrect_label = [], empty_label = [14], corrected_label = ['teacup and saucer'], duplicated_label = [(6, 7)],
 precise_label_in_duplicated = [6]";

pub const GEN_TRANSCRIPT: &str =
    "[5] is [gray scissors, gray scissors with yellow handles]. So, descriptive_label = ['gray_scissors']. [6] ...";

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn check_parser_golden() -> Check {
    let worked = parse_landmark_eval(WORKED_EXAMPLE).map_err(|e| e.to_string())?;
    let expected = EvalFeedback {
        empty: vec![1],
        incorrect: vec![4, 11],
        corrected: strings(&["<object name>", "<object name>"]),
        duplicated: vec![vec![6, 7, 8]],
        precise_in_duplicated: vec![7],
    };
    if worked != expected {
        return Err(format!("worked example parsed to {worked:?}"));
    }
    let transcript = parse_landmark_eval(TRANSCRIPT).map_err(|e| e.to_string())?;
    let expected = EvalFeedback {
        empty: vec![14],
        incorrect: vec![],
        corrected: strings(&["teacup and saucer"]),
        duplicated: vec![vec![6, 7]],
        precise_in_duplicated: vec![6],
    };
    if transcript != expected {
        return Err(format!("transcript parsed to {transcript:?}"));
    }
    let blank = "empty_tags = []\nincorrect_tags = []\ncorrected_tags = []\nduplicated_tags = []\nprecise_tags_in_duplicated = []";
    if parse_landmark_eval(blank).map_err(|e| e.to_string())? != EvalFeedback::default() {
        return Err("all-empty lists did not parse to empty feedback".into());
    }
    let gen = parse_class_label_gen("tag_3 = ['green bag', 'green bag with a handle']").map_err(|e| e.to_string())?;
    if gen.labels != BTreeMap::from([(3, strings(&["green bag", "green bag with a handle"]))]) {
        return Err(format!("tag list parsed to {gen:?}"));
    }
    let gen = parse_class_label_gen(GEN_TRANSCRIPT).map_err(|e| e.to_string())?;
    if gen.labels != BTreeMap::from([(5, strings(&["gray_scissors"]))]) {
        return Err(format!("descriptive label parsed to {gen:?}"));
    }
    Ok("worked example, transcript, empty lists and both label-generation forms parse exactly".into())
}

const LABEL_CHARS: &[char] = &[
    'a', 'b', 'c', 'x', 'y', 'z', 'Q', ' ', ' ', '\'', '"', ',', '[', ']', '(', ')', '\\', '=', '_', '-', 'é', '水',
    '#',
];

pub fn random_label(rng: &mut ChaCha8Rng) -> String {
    loop {
        let len = rng.random_range(1..12);
        let s: String = (0..len).map(|_| LABEL_CHARS[rng.random_range(0..LABEL_CHARS.len())]).collect();
        let t = s.trim().to_string();
        if !t.is_empty() {
            return t;
        }
    }
}

pub fn random_eval_feedback(rng: &mut ChaCha8Rng) -> EvalFeedback {
    let mut numbers: Vec<u32> = (1..=40).collect();
    let mut take = |rng: &mut ChaCha8Rng| numbers.remove(rng.random_range(0..numbers.len()));
    let empty = (0..rng.random_range(0..4)).map(|_| take(rng)).collect();
    let incorrect: Vec<u32> = (0..rng.random_range(0..4)).map(|_| take(rng)).collect();
    let corrected = incorrect.iter().map(|_| random_label(rng)).collect();
    let mut duplicated = Vec::new();
    let mut precise = Vec::new();
    for _ in 0..rng.random_range(0..3) {
        let g: Vec<u32> = (0..rng.random_range(2..4)).map(|_| take(rng)).collect();
        precise.push(g[rng.random_range(0..g.len())]);
        duplicated.push(g);
    }
    EvalFeedback { empty, incorrect, corrected, duplicated, precise_in_duplicated: precise }
}

pub fn random_gen_feedback(rng: &mut ChaCha8Rng) -> GenFeedback {
    let mut labels = BTreeMap::new();
    for _ in 0..rng.random_range(0..4) {
        let mut ls: Vec<String> = Vec::new();
        for _ in 0..rng.random_range(1..4) {
            let l = random_label(rng);
            if !ls.contains(&l) {
                ls.push(l);
            }
        }
        labels.insert(rng.random_range(1..50), ls);
    }
    GenFeedback { labels }
}

pub fn check_render_parse_round_trip(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    for i in 0..instances {
        let fb = random_eval_feedback(&mut rng);
        let text = render_landmark_eval_response(&fb);
        let back = parse_landmark_eval(&text).map_err(|e| format!("instance {i}: {e}\n{text}"))?;
        if back != fb {
            return Err(format!("instance {i}: {fb:?} came back as {back:?}"));
        }
        let gen = random_gen_feedback(&mut rng);
        let text = render_class_label_gen_response(&gen);
        let back = parse_class_label_gen(&text).map_err(|e| format!("instance {i}: {e}\n{text}"))?;
        if back != gen {
            return Err(format!("instance {i}: {gen:?} came back as {back:?}"));
        }
    }
    Ok(format!("{instances} randomized evaluation and label-generation feedbacks round-trip"))
}

// ---------------------------------------------------------------- metrics

fn object(id: u32, position: Vector3<f64>, category: &str) -> WorldObject {
    WorldObject {
        id,
        position,
        extent: Vector3::repeat(0.2),
        category: category.to_string(),
        descriptive: format!("red {category}"),
        active_until: None,
        active_from: None,
    }
}

fn landmark_export(id: usize, position: Vector3<f64>, label: &str) -> LandmarkExport {
    LandmarkExport {
        id,
        position,
        extent: Vector3::repeat(0.2),
        labels: vec![label.to_string()],
        primary_label: label.to_string(),
        status: LandmarkStatus::Correct,
        observations: 3,
    }
}

/// A world of 11 objects and a map of 14 landmarks, 11 of them on target.
pub fn metric_fixture() -> (MapExport, WorldGT) {
    let cats = ["apple", "bag", "banana", "bin", "book", "bottle", "bowl", "box", "chair", "cup", "fan"];
    let objects: Vec<WorldObject> =
        cats.iter().enumerate().map(|(i, c)| object(i as u32, Vector3::new(i as f64, 0.0, 0.5), c)).collect();
    let mut landmarks: Vec<LandmarkExport> = objects
        .iter()
        .map(|o| landmark_export(o.id as usize, o.position + Vector3::new(0.05, 0.05, 0.0), &o.category))
        .collect();
    landmarks.push(landmark_export(11, Vector3::new(0.0, 3.0, 0.5), "apple"));
    landmarks.push(landmark_export(12, Vector3::new(2.0, 0.02, 0.5), "vase"));
    landmarks.push(landmark_export(13, Vector3::new(5.0, 0.0, 0.5), "shoe"));
    let map = MapExport { landmarks, ..MapExport::default() };
    (map, WorldGT { objects, events: Vec::new() })
}

pub fn check_metric_fidelity() -> Check {
    let start = Instant::now();
    let (map, world) = metric_fixture();
    let r = landmark_prf(&map, &world, &MatchConfig::default());
    let elapsed = start.elapsed();
    let shown = format!("{:.2}/{:.2}/{:.2}", r.precision, r.recall, r.f1);
    let ok = shown == "0.79/1.00/0.88" && r.false_pos == 3 && r.est_count == 14 && r.true_pos == 11;
    if ok && elapsed < Duration::from_secs(1) {
        Ok(format!("P/R/F1 = {shown}, est {}, FP {}, {:.1} ms", r.est_count, r.false_pos, elapsed.as_secs_f64() * 1e3))
    } else {
        Err(format!("P/R/F1 = {shown}, est {}, TP {}, FP {}, {elapsed:?}", r.est_count, r.true_pos, r.false_pos))
    }
}

// ---------------------------------------------------------------- scenarios

pub const SCENARIO_FRAMES: usize = 48;

pub fn scenario(seed: u64) -> SimConfig {
    SimConfig { seed, n_objects: 20, n_groups: 3, n_frames: SCENARIO_FRAMES, ..SimConfig::default() }
}

pub fn run_scenario(data: &SimDataset, oracle_on: bool) -> RunResult {
    let cfg = PipelineConfig::default();
    let oracle: Option<Box<dyn Oracle>> = oracle_on
        .then(|| Box::new(ScriptedOracle::new(data.world.clone(), cfg.scripted_oracle.clone())) as Box<dyn Oracle>);
    run(&data.frames, &cfg, oracle).expect("pipeline run")
}

pub fn records(poses: &[Pose], timestamps: &[f64]) -> Vec<TrajectoryRecord> {
    poses.iter().zip(timestamps).map(|(p, t)| TrajectoryRecord::from_pose(*t, p)).collect()
}

pub struct Comparison {
    pub seed: u64,
    pub off: PrfReport,
    pub on: PrfReport,
    pub ape_slam: f64,
    pub ape_odometry: f64,
}

pub fn compare_oracle(seed: u64) -> Comparison {
    let data = simulate(&scenario(seed)).expect("simulate");
    let off = run_scenario(&data, false);
    let on = run_scenario(&data, true);
    let cfg = MatchConfig::default();
    let gt = records(&data.trajectory.gt, &data.timestamps);
    let dr = records(&data.trajectory.dead_reckoning(), &data.timestamps);
    Comparison {
        seed,
        off: landmark_prf(&off.map, &data.world, &cfg),
        on: landmark_prf(&on.map, &data.world, &cfg),
        ape_slam: ape(&off.trajectory, &gt).unwrap().rmse,
        ape_odometry: ape(&dr, &gt).unwrap().rmse,
    }
}

pub fn check_feedback_benefit(runs: &[Comparison], elapsed: Duration) -> Check {
    let detail: Vec<String> = runs
        .iter()
        .map(|c| format!("seed {}: F1 {:.2} FP {} vs off FP {}", c.seed, c.on.f1, c.on.false_pos, c.off.false_pos))
        .collect();
    let ok = runs.iter().all(|c| c.on.f1 >= 0.90 && c.on.false_pos < c.off.false_pos);
    let msg = format!("{}; {:.1} s", detail.join("; "), elapsed.as_secs_f64());
    if ok && elapsed < Duration::from_secs(60) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub fn check_trajectory_benefit(runs: &[Comparison]) -> Check {
    let wins = runs.iter().filter(|c| c.ape_slam <= c.ape_odometry).count();
    let detail: Vec<String> = runs.iter().map(|c| format!("{:.3} vs {:.3}", c.ape_slam, c.ape_odometry)).collect();
    let msg = format!("{wins}/{} seeds, APE RMSE slam vs odometry (m): {}", runs.len(), detail.join(", "));
    if wins >= 4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// The ungrouped object seen most often during the first half of the run.
pub fn removal_target(data: &SimDataset, until: u64) -> u32 {
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    let singles: Vec<&WorldObject> = data
        .world
        .objects
        .iter()
        .filter(|o| data.world.objects.iter().filter(|p| p.category == o.category).count() == 1)
        .collect();
    for (gt, f) in data.trajectory.gt.iter().zip(&data.frames).take(until as usize) {
        for d in &f.detections {
            let world = gt.transform_from_frame(&d.point_cam);
            if let Some(o) = singles.iter().find(|o| (o.position - world).norm() < 0.1) {
                *seen.entry(o.id).or_default() += 1;
            }
        }
    }
    seen.into_iter().max_by_key(|(id, n)| (*n, std::cmp::Reverse(*id))).map(|(id, _)| id).expect("something was seen")
}

fn nearest_landmark(map: &MapExport, p: &Vector3<f64>) -> f64 {
    map.landmarks.iter().map(|l| (l.position - p).norm()).fold(f64::INFINITY, f64::min)
}

pub fn check_scene_change(seeds: &[u64]) -> Check {
    let mut detail = Vec::new();
    let mut ok = true;
    for &seed in seeds {
        let base = simulate(&scenario(seed)).expect("simulate");
        let mid = (SCENARIO_FRAMES / 2) as u64;
        let target = removal_target(&base, mid);
        let cfg = SimConfig { events: vec![removal_event(mid, target)], ..scenario(seed) };
        let data = simulate(&cfg).expect("simulate");
        let position = data.world.object(target).expect("target").position;
        let on = nearest_landmark(&run_scenario(&data, true).map, &position);
        let off = nearest_landmark(&run_scenario(&data, false).map, &position);
        ok &= on > 0.25 && off <= 0.25;
        detail.push(format!("seed {seed}: nearest landmark {on:.2} m with oracle, {off:.2} m without"));
    }
    let msg = detail.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
}

fn add(map: &mut MapState, x: f64, y: f64, label: &str) -> VariableKey {
    let semantics = LandmarkSemantics::new(label).unwrap();
    map.add_landmark(Vector3::new(x, y, 3.0), Vector3::repeat(0.2), semantics, 0).unwrap()
}

/// Seeds D through evaluator feedback on three {precise, generic} pairs,
/// then checks that fresh coincident pairs collapse to the precise label.
pub fn check_duplicate_machinery() -> Check {
    let camera = Pose::identity();
    let k = intrinsics();
    let mut map = MapState::new(LabelDatabase::default());
    let pairs = [("teacup", "cup"), ("handbag", "bag"), ("soccer ball", "ball")];
    let mut dup = EvalFeedback::default();
    let mut seeds = Vec::new();
    for (i, (precise, generic)) in pairs.iter().enumerate() {
        let x = -0.9 + 0.9 * i as f64;
        seeds.push((add(&mut map, x, -0.6, precise), add(&mut map, x, -0.57, generic)));
    }
    let spec = build_composite(&map, &camera, &k, 0, 25);
    for (p, g) in &seeds {
        let np = spec.overlays.iter().find(|o| o.key == *p).ok_or("seed landmark not in view")?.number;
        let ng = spec.overlays.iter().find(|o| o.key == *g).ok_or("seed landmark not in view")?.number;
        dup.duplicated.push(vec![np, ng]);
        dup.precise_in_duplicated.push(np);
    }
    apply_feedback(&dup, &GenFeedback::default(), &spec, &mut map);
    for (precise, generic) in pairs {
        if map.d.count(precise, generic) != 1 {
            return Err(format!("D[{precise}][{generic}] = {}", map.d.count(precise, generic)));
        }
    }

    // fresh scene: three evidenced pairs, one pair without evidence, one far pair
    let mut fresh = MapState { d: map.d.clone(), ..MapState::new(LabelDatabase::default()) };
    let mut expected = Vec::new();
    for (i, (precise, generic)) in pairs.iter().enumerate() {
        let x = -0.9 + 0.9 * i as f64;
        let g = add(&mut fresh, x, 0.0, generic);
        let p = add(&mut fresh, x + 0.004, 0.003, precise);
        expected.push((p, g, precise.to_string(), generic.to_string()));
    }
    add(&mut fresh, 0.0, 0.7, "bowl");
    add(&mut fresh, 0.004, 0.7, "vase");
    add(&mut fresh, 1.0, 0.7, "cup");
    add(&mut fresh, 1.5, 0.7, "teacup");
    let before = fresh.landmarks.len();
    let mut log = EditLog::default();
    let resolved = resolve_proactive_duplicates(&mut fresh, &camera, &k, &DuplicateConfig::default(), 1, &mut log)
        .map_err(|e| e.to_string())?;
    if before - fresh.landmarks.len() != resolved {
        return Err(format!("{resolved} pairs resolved but {} landmarks removed", before - fresh.landmarks.len()));
    }
    if resolved != pairs.len() {
        return Err(format!("{resolved} pairs resolved, expected {}", pairs.len()));
    }
    for (p, g, precise, generic) in &expected {
        let Some(s) = fresh.landmarks.get(p) else { return Err(format!("precise {precise} landmark removed")) };
        if fresh.contains(*g) || s.semantics.primary_label() != precise || !s.semantics.has_label(generic) {
            return Err(format!("pair {precise}/{generic} did not collapse onto {precise}"));
        }
    }
    Ok(format!(
        "{resolved} coincident pairs collapsed to the precise label, {before} -> {} landmarks",
        fresh.landmarks.len()
    ))
}
