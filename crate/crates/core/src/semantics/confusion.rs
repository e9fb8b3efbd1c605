use std::collections::BTreeMap;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use super::SemanticsError;

/// Label-indexed count matrix that grows as new labels are seen.
///
/// Rows are the reference label (refined/true for M, precise for D) and
/// columns the observed one (detected for M, duplicate for D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: IndexSet<String>,
    counts: Vec<Vec<u64>>,
    #[serde(default = "default_smoothing")]
    smoothing: f64,
}

fn default_smoothing() -> f64 {
    1.0
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new(default_smoothing())
    }
}

impl ConfusionMatrix {
    pub fn new(smoothing: f64) -> Self {
        assert!(smoothing > 0.0, "smoothing pseudo-count must be positive");
        Self { labels: IndexSet::new(), counts: Vec::new(), smoothing }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>, smoothing: f64) -> Result<Self, SemanticsError> {
        let n = labels.len();
        let set: IndexSet<String> = labels.into_iter().collect();
        if set.len() != n || counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(SemanticsError::MalformedMatrix(format!("{n} labels vs {}×? counts", counts.len())));
        }
        if smoothing <= 0.0 {
            return Err(SemanticsError::MalformedMatrix("smoothing must be positive".into()));
        }
        Ok(Self { labels: set, counts, smoothing })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains(label)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.get_index_of(label)
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    /// Adds a label with a zero row and column; no-op if already present.
    pub fn insert_label(&mut self, label: &str) -> usize {
        if let Some(i) = self.labels.get_index_of(label) {
            return i;
        }
        let (i, _) = self.labels.insert_full(label.to_string());
        for row in &mut self.counts {
            row.push(0);
        }
        self.counts.push(vec![0; self.labels.len()]);
        i
    }

    pub fn record(&mut self, reference: &str, observed: &str) -> Result<(), SemanticsError> {
        if reference.trim().is_empty() || observed.trim().is_empty() {
            return Err(SemanticsError::EmptyLabel);
        }
        let r = self.insert_label(reference);
        let o = self.insert_label(observed);
        self.counts[r][o] += 1;
        Ok(())
    }

    /// Count for `[reference][observed]`; zero for unknown labels.
    pub fn count(&self, reference: &str, observed: &str) -> u64 {
        match (self.index_of(reference), self.index_of(observed)) {
            (Some(r), Some(o)) => self.counts[r][o],
            _ => 0,
        }
    }

    /// Laplace-smoothed `P(observed | hypothesis)`:
    /// `(n[h][o] + κ) / (Σ_o' n[h][o'] + κN)`.
    pub fn likelihood(&self, observed: &str, hypothesis: &str) -> Result<f64, SemanticsError> {
        let o = self.index_of(observed).ok_or_else(|| SemanticsError::UnknownLabel(observed.into()))?;
        let h = self.index_of(hypothesis).ok_or_else(|| SemanticsError::UnknownLabel(hypothesis.into()))?;
        let row = &self.counts[h];
        let total: u64 = row.iter().sum();
        Ok((row[o] as f64 + self.smoothing) / (total as f64 + self.smoothing * self.len() as f64))
    }
}

pub fn confusion_record(m: &mut ConfusionMatrix, reference: &str, observed: &str) -> Result<(), SemanticsError> {
    m.record(reference, observed)
}

pub fn confusion_likelihood(m: &ConfusionMatrix, observed: &str, hypothesis: &str) -> Result<f64, SemanticsError> {
    m.likelihood(observed, hypothesis)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPosterior {
    pub label: String,
    pub posterior: BTreeMap<String, f64>,
}

impl ClassPosterior {
    pub fn probability(&self, label: &str) -> f64 {
        self.posterior.get(label).copied().unwrap_or(0.0)
    }
}

/// Relative tolerance under which two posterior values count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Bayesian relabeling of one detection against the confusion matrix.
///
/// The detected class gets prior `confidence`, every other class
/// `(1 − confidence)/(N − 1)`; each is weighted by the likelihood of the
/// detected label under that class. Ties keep the detected label, or else
/// the first tied class in matrix order. When the label is unknown to `m` or
/// `N < 2` the detection passes through with a point-mass posterior.
pub fn posterior_class_update(detected: &str, confidence: f64, m: &ConfusionMatrix) -> ClassPosterior {
    let trivial =
        || ClassPosterior { label: detected.to_string(), posterior: BTreeMap::from([(detected.to_string(), 1.0)]) };
    let n = m.len();
    if n < 2 || !m.contains(detected) {
        return trivial();
    }
    let conf = confidence.clamp(0.0, 1.0);
    let other_prior = (1.0 - conf) / (n - 1) as f64;
    let mut scores = Vec::with_capacity(n);
    for hyp in m.labels() {
        let prior = if hyp == detected { conf } else { other_prior };
        let lik = m.likelihood(detected, hyp).expect("both labels are in the matrix");
        scores.push((hyp.to_string(), prior * lik));
    }
    let total: f64 = scores.iter().map(|(_, s)| s).sum();
    if total <= 0.0 || !total.is_finite() {
        return trivial();
    }
    let posterior: BTreeMap<String, f64> = scores.iter().map(|(l, s)| (l.clone(), s / total)).collect();
    let detected_p = posterior[detected];
    let max_p = posterior.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied = |p: f64| max_p - p <= TIE_TOLERANCE * max_p;
    // detected label first, then matrix order
    let label = if tied(detected_p) {
        detected
    } else {
        scores.iter().map(|(l, _)| l.as_str()).find(|l| tied(posterior[*l])).expect("the maximum is tied with itself")
    };
    ClassPosterior { label: label.to_string(), posterior }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn record_resizes() {
        let mut m = ConfusionMatrix::default();
        m.record("cup", "bowl").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.count("cup", "bowl"), 1);
        m.record("cup", "bowl").unwrap();
        assert_eq!(m.count("cup", "bowl"), 2);
        m.record("bowl", "cup").unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.record("", "cup").is_err());
    }

    #[test]
    fn likelihood_examples() {
        let m = ConfusionMatrix::from_counts(["a", "b", "c", "d"].map(String::from).to_vec(), vec![vec![0; 4]; 4], 1.0)
            .unwrap();
        for o in ["a", "b", "c", "d"] {
            for h in ["a", "b", "c", "d"] {
                assert_relative_eq!(m.likelihood(o, h).unwrap(), 0.25);
            }
        }
        let m = ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], vec![vec![0, 9], vec![0, 0]], 1.0).unwrap();
        assert_relative_eq!(m.likelihood("b", "a").unwrap(), 10.0 / 11.0, epsilon = 1e-15);
        assert!(matches!(m.likelihood("z", "a"), Err(SemanticsError::UnknownLabel(_))));
    }

    #[test]
    fn posterior_worked_example() {
        // rows [7,1] and [2,6] with κ = 1 give P(a|a) = 0.8 and P(a|b) = 0.3
        let m = ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], vec![vec![7, 1], vec![2, 6]], 1.0).unwrap();
        assert_relative_eq!(m.likelihood("a", "a").unwrap(), 0.8, epsilon = 1e-15);
        assert_relative_eq!(m.likelihood("a", "b").unwrap(), 0.3, epsilon = 1e-15);
        let post = posterior_class_update("a", 0.9, &m);
        assert_eq!(post.label, "a");
        assert_relative_eq!(post.probability("a"), 0.72 / 0.75, epsilon = 1e-12);
    }

    #[test]
    fn posterior_tie_and_degenerate_prior() {
        let labels: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let uniform = ConfusionMatrix::from_counts(labels.clone(), vec![vec![0; 3]; 3], 1.0).unwrap();
        let post = posterior_class_update("b", 1.0 / 3.0, &uniform);
        assert_eq!(post.label, "b");
        let skewed =
            ConfusionMatrix::from_counts(labels, vec![vec![0, 50, 0], vec![0, 0, 0], vec![0; 3]], 1.0).unwrap();
        let post = posterior_class_update("b", 1.0, &skewed);
        assert_eq!(post.label, "b");
        assert_eq!(post.probability("b"), 1.0);
        assert_eq!(post.probability("a"), 0.0);
        let post = posterior_class_update("b", 0.4, &skewed);
        assert_eq!(post.label, "a");
    }

    #[test]
    fn posterior_passthrough_for_unknown_or_single_label() {
        let mut m = ConfusionMatrix::default();
        let p = posterior_class_update("cup", 0.7, &m);
        assert_eq!(p.label, "cup");
        assert_eq!(p.probability("cup"), 1.0);
        m.insert_label("cup");
        assert_eq!(posterior_class_update("cup", 0.7, &m).posterior.len(), 1);
        m.insert_label("bowl");
        assert_eq!(posterior_class_update("mug", 0.7, &m).label, "mug");
    }

    fn arb_matrix() -> impl Strategy<Value = ConfusionMatrix> {
        (2usize..6).prop_flat_map(|n| {
            prop::collection::vec(prop::collection::vec(0u64..20, n), n).prop_map(move |counts| {
                let labels = (0..n).map(|i| format!("l{i}")).collect();
                ConfusionMatrix::from_counts(labels, counts, 1.0).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn likelihood_rows_are_distributions(m in arb_matrix()) {
            for h in m.labels() {
                let s: f64 = m.labels().map(|o| m.likelihood(o, h).unwrap()).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn resize_preserves_counts(m in arb_matrix(), extra in "[a-z]{1,6}") {
            let mut grown = m.clone();
            grown.record(&extra, "l0").unwrap();
            for r in m.labels() {
                for o in m.labels() {
                    let bump = u64::from(r == extra && o == "l0");
                    prop_assert_eq!(grown.count(r, o), m.count(r, o) + bump);
                }
            }
        }

        #[test]
        fn posterior_normalizes(m in arb_matrix(), conf in 0.0..1.0f64, pick in 0usize..5) {
            let label = m.labels().nth(pick % m.len()).unwrap().to_string();
            let post = posterior_class_update(&label, conf, &m);
            let s: f64 = post.posterior.values().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn uniform_rows_keep_confident_detection(n in 2usize..6, margin in 1e-6..1.0f64, pick in 0usize..5) {
            let labels: Vec<String> = (0..n).map(|i| format!("l{i}")).collect();
            let m = ConfusionMatrix::from_counts(labels.clone(), vec![vec![0; n]; n], 1.0).unwrap();
            let inv = 1.0 / n as f64;
            let conf = inv + (1.0 - inv) * margin;
            let label = &labels[pick % n];
            prop_assert_eq!(&posterior_class_update(label, conf, &m).label, label);
        }
    }
}
