//! Chat-completions agents.
//!
//! Requests follow the common `/chat/completions` JSON shape: a system
//! message and a user message whose content is the image (as a base64 data
//! URL) followed by the prompt text. Responses are read from
//! `choices[0].message.content`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine as _;
use qask_core::agent::{AgentError, Oracle, OracleRequest, Questioner, QuestionerRequest, Timed};
use qask_core::model::QuestionerOutput;
use qask_core::parse::parse_output;
use qask_core::prompt::{
    render_oracle_text, render_questioner_text, OutputFormat, PromptText, TemplateSet,
    FORCE_DECISION_SUFFIX, FORMAT_REMINDER_SUFFIX,
};
use serde_json::{json, Value};

use crate::cache::{now_unix, Cache, CacheEntry, CacheError, CacheKey, KeyParts};
use crate::images::{ImageStore, LoadedImage};

/// Bounds concurrent requests and request rate for one endpoint.
#[derive(Debug)]
pub struct EndpointGate {
    max_concurrent: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    min_interval: Option<Duration>,
    next_slot: Mutex<Option<Instant>>,
}

pub struct GatePermit<'a>(&'a EndpointGate);

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

impl EndpointGate {
    pub fn new(max_concurrent: usize, requests_per_second: Option<f64>) -> Self {
        EndpointGate {
            max_concurrent: max_concurrent.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            min_interval: requests_per_second
                .filter(|r| *r > 0.0)
                .map(|r| Duration::from_secs_f64(1.0 / r)),
            next_slot: Mutex::new(None),
        }
    }

    pub fn acquire(&self) -> GatePermit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max_concurrent {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        drop(n);
        if let Some(interval) = self.min_interval {
            let wait = {
                let mut next = self.next_slot.lock().unwrap();
                let now = Instant::now();
                let slot = next.map_or(now, |t| t.max(now));
                *next = Some(slot + interval);
                slot.saturating_duration_since(now)
            };
            if !wait.is_zero() {
                thread::sleep(wait);
            }
        }
        GatePermit(self)
    }
}

/// Shared gates keyed by endpoint URL.
#[derive(Debug, Default)]
pub struct GateRegistry(Mutex<HashMap<String, Arc<EndpointGate>>>);

impl GateRegistry {
    pub fn gate(&self, endpoint: &str, max_concurrent: usize, rps: Option<f64>) -> Arc<EndpointGate> {
        self.0
            .lock()
            .unwrap()
            .entry(endpoint.to_string())
            .or_insert_with(|| Arc::new(EndpointGate::new(max_concurrent, rps)))
            .clone()
    }
}

/// Append-only JSONL log of live requests and raw responses.
#[derive(Debug)]
pub struct RequestLog(Mutex<File>);

impl RequestLog {
    pub fn open(path: &Path) -> std::io::Result<RequestLog> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RequestLog(Mutex::new(f)))
    }

    pub fn record(&self, line: &Value) {
        let mut f = self.0.lock().unwrap();
        if let Err(e) = writeln!(f, "{line}") {
            log::warn!("request log write failed: {e}");
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChatSettings {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout: Duration,
    pub api_key: Option<String>,
    pub max_transport_retries: u32,
}

pub struct ChatClient {
    settings: ChatSettings,
    http: reqwest::blocking::Client,
    gate: Arc<EndpointGate>,
    log: Option<Arc<RequestLog>>,
    sent: Arc<AtomicUsize>,
}

fn data_url(img: &LoadedImage) -> String {
    format!(
        "data:{};base64,{}",
        img.mime,
        base64::engine::general_purpose::STANDARD.encode(&img.bytes)
    )
}

/// Request body; with `image_url` None the image part carries only its digest.
fn request_body(s: &ChatSettings, prompt: &PromptText, image: Option<(&LoadedImage, bool)>) -> Value {
    let mut content = Vec::new();
    if let Some((img, inline)) = image {
        let url = if inline {
            data_url(img)
        } else {
            format!("sha256:{}", img.digest_hex())
        };
        content.push(json!({"type": "image_url", "image_url": {"url": url}}));
    }
    content.push(json!({"type": "text", "text": prompt.user}));
    json!({
        "model": s.model,
        "temperature": s.temperature,
        "max_tokens": s.max_output_tokens,
        "messages": [
            {"role": "system", "content": prompt.system},
            {"role": "user", "content": content},
        ],
    })
}

fn response_text(v: &Value) -> Option<String> {
    let content = v.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

impl ChatClient {
    pub fn new(
        settings: ChatSettings,
        gate: Arc<EndpointGate>,
        log: Option<Arc<RequestLog>>,
        sent: Arc<AtomicUsize>,
    ) -> Result<ChatClient, AgentError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| AgentError::Other(e.to_string()))?;
        Ok(ChatClient {
            settings,
            http,
            gate,
            log,
            sent,
        })
    }

    pub fn settings(&self) -> &ChatSettings {
        &self.settings
    }

    fn send_once(&self, body: &Value) -> Result<String, AgentError> {
        let _permit = self.gate.acquire();
        self.sent.fetch_add(1, Ordering::Relaxed);
        let mut req = self.http.post(&self.settings.endpoint).json(body);
        if let Some(key) = &self.settings.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                AgentError::Timeout(e.to_string())
            } else {
                AgentError::Transport {
                    message: e.to_string(),
                    retriable: e.is_connect() || e.is_request(),
                }
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| AgentError::Transport {
            message: e.to_string(),
            retriable: true,
        })?;
        if !status.is_success() {
            return Err(AgentError::Transport {
                message: format!("HTTP {status}: {text}"),
                retriable: status.as_u16() == 429 || status.is_server_error(),
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| AgentError::Transport {
            message: format!("malformed response body: {e}"),
            retriable: false,
        })?;
        response_text(&v).ok_or_else(|| AgentError::Transport {
            message: "response has no choices[0].message.content".into(),
            retriable: false,
        })
    }

    /// One completion with transport retries. Returns the text and the latency
    /// in whole microseconds.
    pub fn complete(
        &self,
        agent_id: &str,
        key: &CacheKey,
        prompt: &PromptText,
        image: Option<&LoadedImage>,
    ) -> Result<(String, u64), AgentError> {
        let body = request_body(&self.settings, prompt, image.map(|i| (i, true)));
        let start = Instant::now();
        let mut attempt = 0;
        let result = loop {
            match self.send_once(&body) {
                Err(e) if e.is_retriable() && attempt < self.settings.max_transport_retries => {
                    log::warn!("{agent_id}: {e}; retrying");
                    thread::sleep(Duration::from_millis(100 << attempt));
                    attempt += 1;
                }
                other => break other,
            }
        };
        let latency_us = start.elapsed().as_micros() as u64;
        if let Some(log) = &self.log {
            log.record(&json!({
                "agent_id": agent_id,
                "key": key.hex(),
                "endpoint": self.settings.endpoint,
                "request": request_body(&self.settings, prompt, image.map(|i| (i, false))),
                "response": result.as_ref().ok(),
                "error": result.as_ref().err().map(|e| e.to_string()),
                "latency_us": latency_us,
                "transport_attempts": attempt + 1,
            }));
        }
        result.map(|text| (text, latency_us))
    }

    pub fn key(&self, agent_id: &str, template_version: &str, prompt: &PromptText, image: Option<&LoadedImage>) -> CacheKey {
        let prompt_text = serde_json::to_string(&[&prompt.system, &prompt.user]).expect("strings serialize");
        CacheKey::compute(&KeyParts {
            agent_id,
            model: &self.settings.model,
            temperature: self.settings.temperature,
            template_version,
            prompt: &prompt_text,
            image_digest: image.map(|i| &i.digest),
        })
    }

    pub fn entry(&self, agent_id: &str, key: &CacheKey, prompt: &PromptText, image: Option<&LoadedImage>, response: &str, latency_us: u64) -> CacheEntry {
        CacheEntry {
            key: key.hex(),
            agent_id: agent_id.to_string(),
            model: self.settings.model.clone(),
            request: request_body(&self.settings, prompt, image.map(|i| (i, false))),
            response: response.to_string(),
            latency_us,
            created_unix: now_unix(),
        }
    }
}

pub fn seconds(us: u64) -> f64 {
    us as f64 / 1e6
}

struct Fetched {
    text: String,
    latency_us: u64,
    cached: bool,
}

fn fetch(
    client: &ChatClient,
    cache: &Cache,
    agent_id: &str,
    key: &CacheKey,
    prompt: &PromptText,
    image: Option<&LoadedImage>,
) -> Result<Fetched, AgentError> {
    match cache.get(key) {
        Ok(Some(e)) => Ok(Fetched {
            text: e.response,
            latency_us: e.latency_us,
            cached: true,
        }),
        Ok(None) => {
            let (text, latency_us) = client.complete(agent_id, key, prompt, image)?;
            Ok(Fetched {
                text,
                latency_us,
                cached: false,
            })
        }
        Err(CacheError::ReplayMiss(k)) => Err(AgentError::ReplayMiss(format!("cache key {k}"))),
        Err(e) => Err(AgentError::Other(e.to_string())),
    }
}

fn store(cache: &Cache, entry: CacheEntry, key: &CacheKey) {
    if let Err(e) = cache.put(key, &entry) {
        log::warn!("{e}");
    }
}

pub struct RemoteQuestioner {
    pub id: String,
    pub client: ChatClient,
    pub cache: Arc<Cache>,
    pub images: ImageStore,
    pub templates: Arc<TemplateSet>,
    pub format: OutputFormat,
    pub max_parse_retries: u32,
    /// Also cache responses that failed to parse.
    pub cache_unparsed: bool,
}

impl Questioner for RemoteQuestioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn turn(&mut self, req: &QuestionerRequest<'_>) -> Result<Timed<QuestionerOutput>, AgentError> {
        let mut prompt = render_questioner_text(&self.templates, self.format, req.description, req.context)
            .map_err(|e| AgentError::Other(e.to_string()))?;
        if req.force_decision {
            prompt = prompt.with_suffix(FORCE_DECISION_SUFFIX);
        }
        let image = self
            .images
            .load(req.observation)
            .map_err(|e| AgentError::ImageUnavailable(e.to_string()))?;
        let mut total_us = 0u64;
        let mut all_cached = true;
        let mut attempt = 0u32;
        loop {
            let p = if attempt == 0 {
                prompt.clone()
            } else {
                prompt.clone().with_suffix(FORMAT_REMINDER_SUFFIX)
            };
            let key = self.client.key(&self.id, &self.templates.version, &p, Some(&image));
            let claim = self.cache.claim(&key);
            let got = fetch(&self.client, &self.cache, &self.id, &key, &p, Some(&image))?;
            total_us += got.latency_us;
            all_cached &= got.cached;
            let parsed = parse_output(self.format, &got.text);
            if !got.cached && (parsed.is_ok() || self.cache_unparsed) {
                store(&self.cache, self.client.entry(&self.id, &key, &p, Some(&image), &got.text, got.latency_us), &key);
            }
            drop(claim);
            match parsed {
                Ok(out) => {
                    return Ok(Timed {
                        value: out,
                        latency: seconds(total_us),
                        replayed: all_cached,
                    })
                }
                Err(e) if attempt >= self.max_parse_retries => {
                    return Err(AgentError::Unparseable {
                        attempts: attempt + 1,
                        last: e,
                    })
                }
                Err(e) => {
                    log::warn!("{}: unparseable output ({e}), re-prompting", self.id);
                    attempt += 1;
                }
            }
        }
    }
}

pub struct RemoteOracle {
    pub id: String,
    pub client: ChatClient,
    pub cache: Arc<Cache>,
    pub images: ImageStore,
    pub templates: Arc<TemplateSet>,
}

impl Oracle for RemoteOracle {
    fn id(&self) -> &str {
        &self.id
    }

    fn answer(&mut self, req: &OracleRequest<'_>) -> Result<Timed<String>, AgentError> {
        let prompt = render_oracle_text(&self.templates, req.category, req.question)
            .map_err(|e| AgentError::Other(e.to_string()))?;
        let image = self
            .images
            .load(req.target_image)
            .map_err(|e| AgentError::ImageUnavailable(e.to_string()))?;
        let key = self.client.key(&self.id, &self.templates.version, &prompt, Some(&image));
        let _claim = self.cache.claim(&key);
        let got = fetch(&self.client, &self.cache, &self.id, &key, &prompt, Some(&image))?;
        let answer = got.text.trim().to_string();
        if answer.is_empty() {
            return Err(AgentError::EmptyAnswer);
        }
        if !got.cached {
            store(&self.cache, self.client.entry(&self.id, &key, &prompt, Some(&image), &got.text, got.latency_us), &key);
        }
        Ok(Timed {
            value: answer,
            latency: seconds(got.latency_us),
            replayed: got.cached,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_shapes() {
        let v = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(response_text(&v).unwrap(), "hi");
        let v = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(response_text(&v).unwrap(), "ab");
        assert!(response_text(&json!({"choices": []})).is_none());
    }

    #[test]
    fn gate_limits_concurrency() {
        let gate = Arc::new(EndpointGate::new(2, None));
        let peak = Arc::new(AtomicUsize::new(0));
        let cur = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..6)
            .map(|_| {
                let (gate, peak, cur) = (gate.clone(), peak.clone(), cur.clone());
                thread::spawn(move || {
                    let _p = gate.acquire();
                    let now = cur.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(20));
                    cur.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn gate_spaces_requests() {
        let gate = EndpointGate::new(4, Some(50.0));
        let start = Instant::now();
        for _ in 0..4 {
            drop(gate.acquire());
        }
        assert!(start.elapsed() >= Duration::from_millis(55));
    }
}
