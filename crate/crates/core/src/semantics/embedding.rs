use std::collections::HashMap;
use std::sync::Mutex;

use super::SemanticsError;

/// Maps a label to a unit vector. Implementations must be deterministic:
/// the same label always yields the same vector.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, label: &str) -> Result<Vec<f64>, SemanticsError>;
}

pub fn embed_label(provider: &dyn EmbeddingProvider, label: &str) -> Result<Vec<f64>, SemanticsError> {
    if label.trim().is_empty() {
        return Err(SemanticsError::EmptyLabel);
    }
    provider.embed(label)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Lowercases, maps `_`/`-` to spaces and collapses whitespace, so that
/// `gray_scissors` and `Gray scissors` compare equal.
pub fn normalize_label(label: &str) -> String {
    label.to_lowercase().replace(['_', '-'], " ").split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashed character 3-gram embedding. The label is normalized and padded
/// with one space on each side, so word boundaries contribute grams.
#[derive(Debug, Clone)]
pub struct NgramEmbedding {
    dim: usize,
}

impl Default for NgramEmbedding {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl NgramEmbedding {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn grams(label: &str) -> Vec<String> {
        let padded: Vec<char> = format!(" {} ", normalize_label(label)).chars().collect();
        padded.windows(3).map(|w| w.iter().collect()).collect()
    }
}

impl EmbeddingProvider for NgramEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, label: &str) -> Result<Vec<f64>, SemanticsError> {
        if normalize_label(label).is_empty() {
            return Err(SemanticsError::EmptyLabel);
        }
        let mut v = vec![0.0; self.dim];
        for g in Self::grams(label) {
            v[(fnv1a(g.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }
}

/// Transport for an external embedding service: sends one label, receives
/// one line of decimal floats.
pub trait EmbeddingTransport: Send + Sync {
    fn exchange(&self, label: &str) -> Result<String, String>;
}

impl<F> EmbeddingTransport for F
where
    F: Fn(&str) -> Result<String, String> + Send + Sync,
{
    fn exchange(&self, label: &str) -> Result<String, String> {
        self(label)
    }
}

/// Embedding provider backed by a text request/response protocol. The
/// response is a whitespace- or comma-separated list of exactly `dim`
/// floats; it is normalized and cached per label.
pub struct TextProtocolEmbedding<T> {
    transport: T,
    dim: usize,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<T: EmbeddingTransport> TextProtocolEmbedding<T> {
    pub fn new(transport: T, dim: usize) -> Self {
        Self { transport, dim, cache: Mutex::new(HashMap::new()) }
    }

    pub fn parse_response(&self, text: &str) -> Result<Vec<f64>, SemanticsError> {
        let values: Vec<f64> = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| SemanticsError::MalformedEmbedding(format!("{s:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != self.dim {
            return Err(SemanticsError::MalformedEmbedding(format!(
                "expected {} values, got {}",
                self.dim,
                values.len()
            )));
        }
        let n = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(SemanticsError::MalformedEmbedding("zero or non-finite vector".into()));
        }
        Ok(values.into_iter().map(|x| x / n).collect())
    }
}

impl<T: EmbeddingTransport> EmbeddingProvider for TextProtocolEmbedding<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, label: &str) -> Result<Vec<f64>, SemanticsError> {
        if let Some(v) = self.cache.lock().expect("embedding cache poisoned").get(label) {
            return Ok(v.clone());
        }
        let text = self.transport.exchange(label).map_err(SemanticsError::EmbeddingUnavailable)?;
        let v = self.parse_response(&text)?;
        self.cache.lock().expect("embedding cache poisoned").insert(label.to_string(), v.clone());
        Ok(v)
    }
}
