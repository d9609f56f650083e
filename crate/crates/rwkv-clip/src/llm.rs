//! Chat-completion clients and the description-fusion driver.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use rwkv_clip_core::data::{build_fusion_prompt, LlmRequest, LlmResponse, PairedRecord, FUSION_TEMPLATE, RAW_SLOT, SYNTHETIC_SLOT};

use crate::error::{Error, Result};

pub const API_KEY_VAR: &str = "RWKV_CLIP_LLM_KEY";

pub trait ChatClient: Sync {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse>;
}

/// OpenAI-style `chat/completions` endpoint.
pub struct HttpClient {
    url: String,
    key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    /// `url` is the full endpoint. The key is read from the environment.
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Llm(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            key: std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
            http,
        })
    }
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

pub fn request_body(req: &LlmRequest) -> serde_json::Value {
    serde_json::json!({
        "model": req.model,
        "messages": [{ "role": "user", "content": req.prompt }],
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    })
}

impl ChatClient for HttpClient {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        let t0 = Instant::now();
        let mut rb = self.http.post(&self.url).json(&request_body(req));
        if let Some(k) = &self.key {
            rb = rb.bearer_auth(k);
        }
        let resp = rb.send().map_err(|e| Error::Llm(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Llm(format!("HTTP {status}")));
        }
        let reply: ChatReply = resp.json().map_err(|e| Error::Llm(format!("bad reply: {e}")))?;
        let first = reply
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Llm("reply has no choices".into()))?;
        Ok(LlmResponse {
            text: first.message.content,
            finish_reason: first.finish_reason.unwrap_or_default(),
            latency_ms: t0.elapsed().as_millis() as u64,
        })
    }
}

/// Recovers the raw caption from a fusion prompt. Ambiguous only if the
/// caption itself contains the text between the raw and synthetic slots.
pub fn raw_from_prompt(prompt: &str) -> Option<&str> {
    let (head, rest) = FUSION_TEMPLATE.split_once(RAW_SLOT)?;
    let (mid, _) = rest.split_once(SYNTHETIC_SLOT)?;
    let body = prompt.strip_prefix(head)?;
    body.find(mid).map(|i| &body[..i])
}

/// Offline client answering `"fused: " + raw`. Counts its calls.
#[derive(Default)]
pub struct MockClient {
    pub calls: AtomicUsize,
}

impl ChatClient for MockClient {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let raw = raw_from_prompt(&req.prompt).ok_or_else(|| Error::Llm("not a fusion prompt".into()))?;
        Ok(LlmResponse {
            text: format!("fused: {raw}"),
            finish_reason: "stop".into(),
            latency_ms: 0,
        })
    }
}

/// Fails the first `failures` calls for each distinct prompt, then defers
/// to the mock.
pub struct FlakyClient {
    pub failures: usize,
    seen: Mutex<HashMap<String, usize>>,
    inner: MockClient,
}

impl FlakyClient {
    pub fn new(failures: usize) -> Self {
        Self {
            failures,
            seen: Mutex::new(HashMap::new()),
            inner: MockClient::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.seen.lock().unwrap().values().sum()
    }
}

impl ChatClient for FlakyClient {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        let n = {
            let mut seen = self.seen.lock().unwrap();
            let c = seen.entry(req.prompt.clone()).or_insert(0);
            *c += 1;
            *c
        };
        if n <= self.failures {
            return Err(Error::Llm(format!("injected failure {n}")));
        }
        self.inner.complete(req)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseOptions {
    pub model: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub concurrency: usize,
    /// Extra attempts after the first failure.
    pub retries: usize,
    /// Delay before retry `k` is `backoff * 2^(k-1)`.
    pub backoff: Duration,
}

impl Default for FuseOptions {
    fn default() -> Self {
        Self {
            model: "llama3-8b-instruct".into(),
            max_tokens: 256,
            temperature: 0.2,
            concurrency: 4,
            retries: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FuseReport {
    pub requested: usize,
    pub filled: usize,
    pub retries: usize,
    /// Record id -> last error, for records that exhausted their retries.
    pub failed: Vec<(String, String)>,
}

enum Outcome {
    Filled { index: usize, text: String, retries: usize },
    Failed { index: usize, error: String, retries: usize },
}

fn attempt(client: &dyn ChatClient, req: &LlmRequest, opts: &FuseOptions, index: usize) -> Outcome {
    let mut retries = 0;
    loop {
        match client.complete(req) {
            Ok(r) => return Outcome::Filled { index, text: r.text, retries },
            Err(e) if retries >= opts.retries => {
                return Outcome::Failed { index, error: e.to_string(), retries }
            }
            Err(_) => {
                std::thread::sleep(opts.backoff * (1u32 << retries.min(16)));
                retries += 1;
            }
        }
    }
}

/// Fills `generated_description` on every record through `client`. Up to
/// `concurrency` requests are in flight; a single collector applies the
/// answers. Failed records are left unfilled and listed in the report.
pub fn fuse_descriptions(records: &mut [PairedRecord], client: &dyn ChatClient, opts: &FuseOptions) -> Result<FuseReport> {
    let mut report = FuseReport {
        requested: records.len(),
        ..FuseReport::default()
    };
    if records.is_empty() {
        return Ok(report);
    }
    let requests = records
        .iter()
        .map(|r| {
            let prompt = build_fusion_prompt(&r.raw_text, r.synthetic_caption.as_deref().unwrap_or(""), &r.tags)?;
            let mut req = LlmRequest::new(prompt, opts.model.clone())?;
            req.max_tokens = opts.max_tokens;
            req.temperature = opts.temperature;
            Ok(req)
        })
        .collect::<Result<Vec<_>>>()?;

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for _ in 0..opts.concurrency.clamp(1, requests.len()) {
            let tx = tx.clone();
            let (next, requests) = (&next, &requests);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= requests.len() || tx.send(attempt(client, &requests[i], opts, i)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for outcome in rx {
            match outcome {
                Outcome::Filled { index, text, retries } => {
                    records[index].generated_description = Some(text);
                    report.filled += 1;
                    report.retries += retries;
                }
                Outcome::Failed { index, error, retries } => {
                    report.failed.push((records[index].id.clone(), error));
                    report.retries += retries;
                }
            }
        }
    });
    report.failed.sort();
    Ok(report)
}
