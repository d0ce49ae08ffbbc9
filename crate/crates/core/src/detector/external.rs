//! Adapter for an open-vocabulary detector running out of process.
//!
//! Request: `{"image": "<path>", "prompt": "<text>", "threshold": <float>}`
//! Reply:   `{"boxes": [{"xyxy": [x1, y1, x2, y2], "logit": <float>}, ...]}`
//!
//! Over a subprocess each message is a single line on stdin/stdout; over
//! HTTP the request is the POST body and the reply the response body.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde_json::{json, Value};

use super::{finalize, DetectionRequest, DetectionResponse, Detector};
use crate::dataset::ImageSource;
use crate::error::{Error, Result};
use crate::geometry::{BBox, ScoredBox};
use crate::imaging;

pub const ENDPOINT_ENV: &str = "ZSC_DETECTOR_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Http(String),
    Command(Vec<String>),
}

impl Endpoint {
    /// URLs starting with `http://` or `https://` use HTTP POST; anything
    /// else is a whitespace-separated command line.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(Endpoint::Http(s.to_string()));
        }
        let argv: Vec<String> = s.split_whitespace().map(str::to_string).collect();
        if argv.is_empty() {
            return Err(Error::Config("empty detector endpoint".into()));
        }
        Ok(Endpoint::Command(argv))
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Http(url) => write!(f, "{url}"),
            Endpoint::Command(argv) => write!(f, "{}", argv.join(" ")),
        }
    }
}

struct Backend {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ExternalDetector {
    endpoint: Endpoint,
    backend: Mutex<Option<Backend>>,
    scratch: PathBuf,
}

impl ExternalDetector {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            backend: Mutex::new(None),
            scratch: std::env::temp_dir().join(format!("zsc-detector-{}", std::process::id())),
        }
    }

    fn image_path(&self, request: &DetectionRequest) -> Result<PathBuf> {
        match &request.image {
            ImageSource::Path(p) => Ok(p.clone()),
            ImageSource::Memory(img) => {
                let name: String = request
                    .image_id
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
                    .collect();
                let path = self.scratch.join(format!("{name}.png"));
                if !path.exists() {
                    imaging::save_png(img, &path)?;
                }
                Ok(path)
            }
        }
    }

    fn exchange_subprocess(&self, argv: &[String], line: &str) -> Result<Vec<u8>> {
        let mut guard = self.backend.lock().map_err(|_| Error::Transport("backend lock poisoned".into()))?;
        if guard.is_none() {
            let mut child = Command::new(&argv[0])
                .args(&argv[1..])
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()
                .map_err(|e| Error::Transport(format!("cannot spawn {:?}: {e}", argv[0])))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
            *guard = Some(Backend { child, stdin, stdout });
        }
        let backend = guard.as_mut().expect("backend started");
        let io_err = |e: std::io::Error| Error::Transport(format!("detector pipe: {e}"));
        backend.stdin.write_all(line.as_bytes()).map_err(io_err)?;
        backend.stdin.write_all(b"\n").map_err(io_err)?;
        backend.stdin.flush().map_err(io_err)?;
        let mut reply = String::new();
        let n = backend.stdout.read_line(&mut reply).map_err(io_err)?;
        if n == 0 {
            *guard = None;
            return Err(Error::Transport("detector process closed its output".into()));
        }
        Ok(reply.into_bytes())
    }

    fn exchange_http(&self, url: &str, body: &Value) -> Result<Vec<u8>> {
        let mut resp = ureq::post(url)
            .send_json(body)
            .map_err(|e| Error::Transport(format!("POST {url}: {e}")))?;
        resp.body_mut()
            .read_to_vec()
            .map_err(|e| Error::Transport(format!("reading reply from {url}: {e}")))
    }
}

impl Drop for ExternalDetector {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.backend.lock() {
            if let Some(mut b) = guard.take() {
                let _ = b.child.kill();
                let _ = b.child.wait();
            }
        }
    }
}

impl Detector for ExternalDetector {
    fn id(&self) -> String {
        format!("external:{}", self.endpoint)
    }

    fn propose(&self, request: &DetectionRequest) -> Result<DetectionResponse> {
        let path = self.image_path(request)?;
        let body = json!({
            "image": path.to_string_lossy(),
            "prompt": request.prompt,
            "threshold": request.logit_threshold,
        });
        let raw = match &self.endpoint {
            Endpoint::Http(url) => self.exchange_http(url, &body)?,
            Endpoint::Command(argv) => self.exchange_subprocess(argv, &body.to_string())?,
        };
        let mut resp = parse_external_response(&raw, request)?;
        resp.detector_id = self.id();
        Ok(resp)
    }
}

/// Validate a reply: every record needs a 4-number `xyxy` with
/// `x1 < x2`, `y1 < y2` and a `logit` in `[0, 1]`. The result is clipped to
/// the image, threshold-filtered and ranked.
pub fn parse_external_response(raw: &[u8], request: &DetectionRequest) -> Result<DetectionResponse> {
    let value: Value = serde_json::from_slice(raw)
        .map_err(|e| Error::protocol(None, format!("reply is not JSON: {e}")))?;
    let records = value
        .get("boxes")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::protocol(None, "missing `boxes` array"))?;
    let mut boxes = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let coords = rec
            .get("xyxy")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::protocol(Some(i), "missing `xyxy`"))?;
        let coords: Vec<f64> = coords.iter().filter_map(Value::as_f64).collect();
        if coords.len() != 4 {
            return Err(Error::protocol(Some(i), "`xyxy` must hold 4 numbers"));
        }
        let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3])
            .map_err(|e| Error::protocol(Some(i), e.to_string()))?;
        let logit = rec
            .get("logit")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::protocol(Some(i), "missing `logit`"))?;
        if !(0.0..=1.0).contains(&logit) {
            return Err(Error::protocol(Some(i), format!("logit {logit} outside [0, 1]")));
        }
        boxes.push(ScoredBox {
            bbox,
            logit,
            source_prompt: request.prompt.clone(),
        });
    }
    let prompt_echo = value
        .get("prompt")
        .and_then(Value::as_str)
        .unwrap_or(&request.prompt)
        .to_string();
    Ok(finalize(
        DetectionResponse {
            boxes,
            prompt_echo,
            detector_id: "external".into(),
        },
        request,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn request() -> DetectionRequest {
        DetectionRequest {
            image_id: "a.png".into(),
            image: ImageSource::Memory(Arc::new(image::RgbImage::new(32, 32))),
            width: 32,
            height: 32,
            prompt: "apple".into(),
            logit_threshold: 0.02,
        }
    }

    #[test]
    fn minimal_payload() {
        let r = parse_external_response(br#"{"boxes":[{"xyxy":[0,0,10,10],"logit":0.9}]}"#, &request()).unwrap();
        assert_eq!(r.boxes.len(), 1);
        assert_eq!(r.boxes[0].bbox.xyxy(), [0.0, 0.0, 10.0, 10.0]);
        assert_eq!(r.prompt_echo, "apple");
    }

    #[test]
    fn invariant_violations_name_the_record() {
        let inverted = br#"{"boxes":[{"xyxy":[0,0,5,5],"logit":0.5},{"xyxy":[10,0,0,10],"logit":0.9}]}"#;
        assert!(matches!(
            parse_external_response(inverted, &request()),
            Err(Error::Protocol { index: Some(1), .. })
        ));
        let range = br#"{"boxes":[{"xyxy":[0,0,10,10],"logit":1.3}]}"#;
        assert!(matches!(
            parse_external_response(range, &request()),
            Err(Error::Protocol { index: Some(0), .. })
        ));
        let missing = br#"{"boxes":[{"xyxy":[0,0,10,10]}]}"#;
        assert!(matches!(
            parse_external_response(missing, &request()),
            Err(Error::Protocol { index: Some(0), .. })
        ));
        assert!(parse_external_response(b"not json", &request()).is_err());
    }

    #[test]
    fn reply_is_clipped_filtered_and_ranked() {
        let raw = br#"{"boxes":[
            {"xyxy":[-5,-5,10,10],"logit":0.4},
            {"xyxy":[0,0,4,4],"logit":0.01},
            {"xyxy":[20,20,40,40],"logit":0.8},
            {"xyxy":[40,40,50,50],"logit":0.9}
        ]}"#;
        let r = parse_external_response(raw, &request()).unwrap();
        let got: Vec<[f64; 4]> = r.boxes.iter().map(|b| b.bbox.xyxy()).collect();
        assert_eq!(got, vec![[20.0, 20.0, 32.0, 32.0], [0.0, 0.0, 10.0, 10.0]]);
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(Endpoint::parse("http://x:1/detect").unwrap(), Endpoint::Http("http://x:1/detect".into()));
        assert_eq!(
            Endpoint::parse("python3 det.py").unwrap(),
            Endpoint::Command(vec!["python3".into(), "det.py".into()])
        );
        assert!(Endpoint::parse("  ").is_err());
    }
}
