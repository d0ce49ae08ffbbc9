//! Text-conditioned detection `G(image, prompt)`.
//!
//! Backends implement [`Detector::propose`]; [`Detector::detect`] applies the
//! shared contract on top: boxes clipped to the image, logits at or above the
//! request threshold, ranked by logit (ties: larger area first, then backend
//! order).

mod external;
mod synthetic;

pub use external::{parse_external_response, Endpoint, ExternalDetector, ENDPOINT_ENV};
pub use synthetic::{synthetic_detect, NoiseSpec, SyntheticDetector};

use serde::{Deserialize, Serialize};

use crate::dataset::{CountingRecord, ImageSource};
use crate::error::{Error, Result};
use crate::geometry::{sort_ranked, ScoredBox};

/// Prompt used for class-agnostic proposals.
pub const GENERIC_PROMPT: &str = "object";

#[derive(Debug, Clone)]
pub struct DetectionRequest {
    pub image_id: String,
    pub image: ImageSource,
    pub width: usize,
    pub height: usize,
    pub prompt: String,
    pub logit_threshold: f64,
}

impl DetectionRequest {
    pub fn for_record(record: &CountingRecord, prompt: &str, logit_threshold: f64) -> Self {
        Self {
            image_id: record.image_id.clone(),
            image: record.image.clone(),
            width: record.width,
            height: record.height,
            prompt: prompt.to_string(),
            logit_threshold,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::Usage("detection prompt must be nonempty".into()));
        }
        if !(0.0..1.0).contains(&self.logit_threshold) {
            return Err(Error::Usage(format!(
                "logit threshold {} outside [0, 1)",
                self.logit_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResponse {
    pub boxes: Vec<ScoredBox>,
    pub prompt_echo: String,
    pub detector_id: String,
}

pub trait Detector: Send + Sync {
    fn id(&self) -> String;

    /// Raw backend output; may be unclipped, unsorted and below threshold.
    fn propose(&self, request: &DetectionRequest) -> Result<DetectionResponse>;

    fn detect(&self, request: &DetectionRequest) -> Result<DetectionResponse> {
        request.validate()?;
        let raw = self.propose(request)?;
        Ok(finalize(raw, request))
    }
}

pub(crate) fn finalize(mut response: DetectionResponse, request: &DetectionRequest) -> DetectionResponse {
    let (w, h) = (request.width as f64, request.height as f64);
    response.boxes = response
        .boxes
        .into_iter()
        .filter(|b| b.logit >= request.logit_threshold)
        .filter_map(|mut b| {
            b.bbox = b.bbox.clip(w, h)?;
            Some(b)
        })
        .collect();
    sort_ranked(&mut response.boxes);
    response
}

/// Parse `synthetic` or `external:<endpoint>`; the endpoint may be overridden
/// by the environment variable named in [`ENDPOINT_ENV`].
pub fn parse_detector_flag(flag: &str) -> Result<DetectorChoice> {
    if flag == "synthetic" {
        return Ok(DetectorChoice::Synthetic);
    }
    if let Some(endpoint) = flag.strip_prefix("external") {
        let endpoint = endpoint.strip_prefix(':').unwrap_or("");
        let endpoint = std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| endpoint.to_string());
        if endpoint.is_empty() {
            return Err(Error::Config(format!(
                "external detector needs an endpoint (external:<endpoint> or ${ENDPOINT_ENV})"
            )));
        }
        return Ok(DetectorChoice::External(Endpoint::parse(&endpoint)?));
    }
    Err(Error::Config(format!("unknown detector {flag:?}; expected synthetic or external:<endpoint>")))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectorChoice {
    Synthetic,
    External(Endpoint),
}
