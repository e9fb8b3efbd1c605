use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CompositeSpec, SupervisionError};

/// The two evaluator roles. Implementations are moved onto a worker thread.
pub trait Oracle: Send {
    fn landmark_eval(&mut self, spec: &CompositeSpec, prompt: &str) -> Result<String, SupervisionError>;
    fn class_label_gen(&mut self, spec: &CompositeSpec, prompt: &str) -> Result<String, SupervisionError>;
}

#[derive(Debug, Serialize)]
struct OverlayWire<'a> {
    number: u32,
    #[serde(rename = "box")]
    bbox: [i64; 4],
    label: &'a str,
}

#[derive(Debug, Serialize)]
struct RequestWire<'a> {
    frame_id: u64,
    prompt: &'a str,
    overlays: Vec<OverlayWire<'a>>,
    image_path: Option<&'a str>,
}

#[derive(Debug, Deserialize)]
struct ResponseWire {
    text: String,
}

/// JSON-over-HTTP evaluator: `POST {base}/landmark_eval` and
/// `POST {base}/class_label_gen`, each answering `{"text": ...}`.
pub struct HttpOracle {
    base: String,
    agent: ureq::Agent,
    image_path: Option<String>,
}

impl HttpOracle {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(true).build().new_agent();
        Self { base: base_url.trim_end_matches('/').to_string(), agent, image_path: None }
    }

    pub fn with_image_path(mut self, path: impl Into<String>) -> Self {
        self.image_path = Some(path.into());
        self
    }

    fn call(&self, endpoint: &str, spec: &CompositeSpec, prompt: &str) -> Result<String, SupervisionError> {
        let body = RequestWire {
            frame_id: spec.frame_id,
            prompt,
            overlays: spec
                .overlays
                .iter()
                .map(|o| OverlayWire { number: o.number, bbox: o.pixel_box.rounded(), label: &o.label })
                .collect(),
            image_path: self.image_path.as_deref(),
        };
        let url = format!("{}/{endpoint}", self.base);
        let mut resp = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| SupervisionError::OracleUnavailable(format!("{url}: {e}")))?;
        let parsed: ResponseWire = resp
            .body_mut()
            .read_json()
            .map_err(|e| SupervisionError::OracleUnavailable(format!("{url}: bad response body: {e}")))?;
        Ok(parsed.text)
    }
}

impl Oracle for HttpOracle {
    fn landmark_eval(&mut self, spec: &CompositeSpec, prompt: &str) -> Result<String, SupervisionError> {
        self.call("landmark_eval", spec, prompt)
    }

    fn class_label_gen(&mut self, spec: &CompositeSpec, prompt: &str) -> Result<String, SupervisionError> {
        self.call("class_label_gen", spec, prompt)
    }
}
