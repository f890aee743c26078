use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{ChatBackend, ChatMessage, ModelEndpoint, VlmError, DEFAULT_MAX_IN_FLIGHT};

const BODY_EXCERPT: usize = 512;

/// Blocking client for `POST {base_url}/chat/completions`.
pub struct HttpClient {
    endpoint: ModelEndpoint,
    agent: ureq::Agent,
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    slot_freed: Condvar,
}

enum Attempt {
    Done(String),
    Retry(VlmError),
    Fatal(VlmError),
}

impl HttpClient {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, VlmError> {
        endpoint.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            endpoint,
            agent,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            in_flight: Mutex::new(0),
            slot_freed: Condvar::new(),
        })
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.max_in_flight = cap.max(1);
        self
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    fn request_body(&self, messages: &[ChatMessage], temperature: f64) -> Value {
        let b64 = base64::engine::general_purpose::STANDARD;
        let msgs: Vec<Value> = messages
            .iter()
            .map(|m| {
                if m.images.is_empty() {
                    json!({ "role": m.role.as_str(), "content": m.text })
                } else {
                    let mut parts = vec![json!({ "type": "text", "text": m.text })];
                    for img in &m.images {
                        parts.push(json!({
                            "type": "image_url",
                            "image_url": { "url": format!("data:image/png;base64,{}", b64.encode(img)) }
                        }));
                    }
                    json!({ "role": m.role.as_str(), "content": parts })
                }
            })
            .collect();
        json!({ "model": self.endpoint.model_name, "messages": msgs, "temperature": temperature })
    }

    fn attempt(&self, url: &str, body: &str) -> Attempt {
        let mut req = self.agent.post(url).content_type("application/json");
        if !self.endpoint.api_key.is_empty() {
            req = req.header("Authorization", format!("Bearer {}", self.endpoint.api_key.expose()));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(VlmError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(VlmError::Transport(e.to_string())),
        };
        if (200..300).contains(&status) {
            return match extract_content(&text) {
                Some(reply) => Attempt::Done(reply),
                None => Attempt::Fatal(VlmError::Api { status, body: excerpt(&text) }),
            };
        }
        let err = VlmError::Api { status, body: excerpt(&text) };
        if status == 429 || status >= 500 {
            Attempt::Retry(err)
        } else {
            Attempt::Fatal(err)
        }
    }

    fn acquire(&self) {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max_in_flight {
            n = self.slot_freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
    }

    fn release(&self) {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.slot_freed.notify_one();
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(BODY_EXCERPT).collect()
}

fn extract_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    let content = &v["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => {
            let text: Vec<&str> = parts.iter().filter_map(|p| p["text"].as_str()).collect();
            (!text.is_empty()).then(|| text.join(""))
        }
        _ => None,
    }
}

impl ChatBackend for HttpClient {
    fn chat(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, VlmError> {
        let url = format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'));
        let body = self.request_body(messages, temperature).to_string();
        self.acquire();
        let mut result = Err(VlmError::Transport("no attempt made".into()));
        for attempt in 0..=self.endpoint.max_retries {
            if attempt > 0 {
                let base = self.endpoint.backoff_base_s * 2f64.powi(attempt as i32 - 1);
                let delay = base * (1.0 + 0.25 * rand::random::<f64>());
                log::warn!("chat request failed, retry {attempt} in {delay:.2}s");
                std::thread::sleep(Duration::from_secs_f64(delay));
            }
            match self.attempt(&url, &body) {
                Attempt::Done(reply) => {
                    result = Ok(reply);
                    break;
                }
                Attempt::Fatal(e) => {
                    result = Err(e);
                    break;
                }
                Attempt::Retry(e) => result = Err(e),
            }
        }
        self.release();
        result
    }

    fn label(&self) -> String {
        format!("http:{}", self.endpoint.model_name)
    }
}
