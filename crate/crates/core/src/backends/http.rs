//! Blocking HTTP clients for the backend wire contracts.
//!
//! * chat: `POST {chat_url}` with `{model, messages:[{role, content:[...]}]}`,
//!   reply `{choices:[{message:{content}}]}`
//! * grounder: `POST {grounder_url}/ground` with `{image, query}`, reply `{points:[{x,y}]}`
//! * segmenter: `POST {segmenter_url}/segment` with `{image, points}`, reply
//!   `{width, height, runs, box:{x0,y0,x1,y1}}`
//! * judge: `POST {judge_url}/score`, `/consistency`, `/alignment`, `/quality`

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{
    BackendError, ChatBackend, ChatMessage, GroundReply, Grounder, Judge, RawQuality, RawVerdict,
    SegmentReply, Segmenter,
};
use crate::protocol::RawModelText;
use crate::render::Point;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendEndpoints {
    pub chat_url: String,
    pub grounder_url: String,
    pub segmenter_url: String,
    pub judge_url: String,
    /// Model name sent in chat requests.
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub auth_token: Option<String>,
    /// Upper bound on requests in flight across all roles.
    pub max_in_flight: usize,
}

impl Default for BackendEndpoints {
    fn default() -> Self {
        BackendEndpoints {
            chat_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            grounder_url: "http://127.0.0.1:8001".into(),
            segmenter_url: "http://127.0.0.1:8002".into(),
            judge_url: "http://127.0.0.1:8003".into(),
            model: "default".into(),
            timeout_ms: 60_000,
            max_retries: 2,
            auth_token: None,
            max_in_flight: 8,
        }
    }
}

impl BackendEndpoints {
    pub fn check(&self) -> Result<(), BackendError> {
        if self.timeout_ms == 0 {
            return Err(BackendError::Precondition("timeout_ms must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Precondition("max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter { available: Mutex::new(n), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// All four roles over HTTP. Shareable across threads.
#[derive(Debug)]
pub struct HttpBackends {
    endpoints: BackendEndpoints,
    agent: ureq::Agent,
    limiter: Limiter,
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn join(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

impl HttpBackends {
    pub fn new(endpoints: BackendEndpoints) -> Result<Self, BackendError> {
        endpoints.check()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(endpoints.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = Limiter::new(endpoints.max_in_flight);
        Ok(HttpBackends { endpoints, agent, limiter })
    }

    pub fn endpoints(&self) -> &BackendEndpoints {
        &self.endpoints
    }

    fn attempt(&self, url: &str, body: &Value, attempts: u32) -> Result<Value, BackendError> {
        let _permit = self.limiter.acquire();
        let mut request = self.agent.post(url);
        if let Some(token) = &self.endpoints.auth_token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout { attempts },
            other => BackendError::Transport { attempts, message: other.to_string() },
        })?;
        let code = response.status().as_u16();
        if !(200..300).contains(&code) {
            return Err(BackendError::BadStatus { code, attempts });
        }
        response.body_mut().read_json::<Value>().map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout { attempts },
            ureq::Error::Json(e) => BackendError::ContractViolation(format!("reply is not JSON: {e}")),
            other => BackendError::Transport { attempts, message: other.to_string() },
        })
    }

    /// POSTs `body`, retrying transient failures up to `max_retries` times.
    pub fn post_json(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(url, body, attempts) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempts <= self.endpoints.max_retries => {
                    warn!(url, attempts, error = %e, "retrying backend request");
                    std::thread::sleep(Duration::from_millis(50 * attempts as u64));
                }
                Err(e) => {
                    debug!(url, attempts, error = %e, "backend request failed");
                    return Err(e);
                }
            }
        }
    }

    fn decode<T: for<'de> Deserialize<'de>>(value: Value, what: &str) -> Result<T, BackendError> {
        serde_json::from_value(value)
            .map_err(|e| BackendError::ContractViolation(format!("{what} reply: {e}")))
    }
}

/// The chat request body for `messages`.
pub fn chat_request_body(model: &str, messages: &[ChatMessage]) -> Value {
    let messages: Vec<Value> = messages
        .iter()
        .map(|m| {
            let mut content = vec![json!({"type": "text", "text": m.text})];
            content.extend(m.images.iter().map(|img| json!({"type": "image", "data": img.to_base64()})));
            json!({"role": m.role.to_string(), "content": content})
        })
        .collect();
    json!({"model": model, "messages": messages})
}

impl ChatBackend for HttpBackends {
    fn complete(&self, messages: &[ChatMessage]) -> Result<RawModelText, BackendError> {
        let body = chat_request_body(&self.endpoints.model, messages);
        let reply = self.post_json(&self.endpoints.chat_url, &body)?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::ContractViolation("chat reply has no choices[0].message.content".into()))?;
        let completion_tokens = reply
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .map(|n| n as u32);
        Ok(RawModelText { text: text.to_string(), completion_tokens })
    }
}

impl Grounder for HttpBackends {
    fn locate(&self, image_png: &[u8], query: &str) -> Result<GroundReply, BackendError> {
        let body = json!({"image": b64(image_png), "query": query});
        let reply = self.post_json(&join(&self.endpoints.grounder_url, "ground"), &body)?;
        Self::decode(reply, "ground")
    }
}

impl Segmenter for HttpBackends {
    fn segment(&self, image_png: &[u8], points: &[Point]) -> Result<SegmentReply, BackendError> {
        let body = json!({"image": b64(image_png), "points": points});
        let reply = self.post_json(&join(&self.endpoints.segmenter_url, "segment"), &body)?;
        Self::decode(reply, "segment")
    }
}

impl HttpBackends {
    fn verdict(&self, path: &str, body: Value, key: &str) -> Result<RawVerdict, BackendError> {
        let reply = self.post_json(&join(&self.endpoints.judge_url, path), &body)?;
        let verdict = reply
            .get(key)
            .cloned()
            .ok_or_else(|| BackendError::ContractViolation(format!("{path} reply lacks `{key}`")))?;
        let rationale = reply.get("rationale").and_then(Value::as_str).unwrap_or_default().to_string();
        Ok(RawVerdict { verdict, rationale })
    }
}

impl Judge for HttpBackends {
    fn score(&self, question: &str, candidate: &str, ground_truth: &str) -> Result<RawVerdict, BackendError> {
        let body = json!({"question": question, "candidate_answer": candidate, "ground_truth": ground_truth});
        self.verdict("score", body, "score")
    }

    fn consistency(&self, marked_png: &[u8], reflection: &str) -> Result<RawVerdict, BackendError> {
        let body = json!({"marked_image": b64(marked_png), "reflection_text": reflection});
        self.verdict("consistency", body, "consistent")
    }

    fn alignment(&self, question: &str, answer: &str, ground_truth: &str) -> Result<RawVerdict, BackendError> {
        let body = json!({"question": question, "answer": answer, "ground_truth": ground_truth});
        self.verdict("alignment", body, "aligned")
    }

    fn quality(&self, sample: &str, image_png: Option<&[u8]>) -> Result<RawQuality, BackendError> {
        let body = json!({"sample": sample, "image": image_png.map(b64)});
        let reply = self.post_json(&join(&self.endpoints.judge_url, "quality"), &body)?;
        Self::decode(reply, "quality")
    }
}
