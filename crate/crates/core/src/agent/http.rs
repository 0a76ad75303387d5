//! Live chat-completions client and the analyzer built on it.
//!
//! Configuration comes from `CORRLOOP_LLM_URL`, `CORRLOOP_LLM_MODEL` and
//! `CORRLOOP_LLM_KEY`. Every request/response pair is kept in an ordered
//! transcript that the loop persists per iteration.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Analyzer, RequirementWriter};
use crate::error::{Error, Result};
use crate::scene::{self, CH_AMBIENT, CH_DETECTION, CH_FOREGROUND, CH_PLAN, CH_PREDICTION, CH_ROAD};
use crate::taxonomy::{Extractor, FailureRecord, Label, Summarizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub url: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub retries: usize,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    /// Independent classification queries averaged per failure.
    pub votes: usize,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            timeout_secs: 60,
            retries: 3,
            backoff_ms: 250,
            max_in_flight: 4,
            votes: 3,
        }
    }

    pub fn from_env() -> Result<Self> {
        let url = std::env::var("CORRLOOP_LLM_URL").map_err(|_| Error::Config("CORRLOOP_LLM_URL is not set".into()))?;
        let model = std::env::var("CORRLOOP_LLM_MODEL").unwrap_or_else(|_| "gpt-4o".into());
        let mut cfg = Self::new(url, model);
        cfg.api_key = std::env::var("CORRLOOP_LLM_KEY").ok();
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: usize,
    pub attempts: usize,
    pub request: Value,
    pub response: Option<String>,
    pub error: Option<String>,
}

pub struct HttpClient {
    cfg: HttpConfig,
    agent: ureq::Agent,
    transcript: Mutex<Vec<TranscriptEntry>>,
    next_seq: Mutex<usize>,
}

impl HttpClient {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(cfg.timeout_secs)).build();
        Self { cfg, agent, transcript: Mutex::new(Vec::new()), next_seq: Mutex::new(0) }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    fn reserve(&self, n: usize) -> usize {
        let mut s = self.next_seq.lock().unwrap();
        let first = *s;
        *s += n;
        first
    }

    fn post_once(&self, body: &Value) -> std::result::Result<String, String> {
        let mut req = self.agent.post(&self.cfg.url).set("Content-Type", "application/json");
        if let Some(k) = &self.cfg.api_key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        let resp = req.send_json(body.clone()).map_err(|e| e.to_string())?;
        let v: Value = resp.into_json().map_err(|e| e.to_string())?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| format!("response lacks choices[0].message.content: {v}"))
    }

    fn run(&self, seq: usize, messages: Value) -> Result<String> {
        let body = json!({ "model": self.cfg.model, "temperature": 0, "messages": messages });
        let mut last = String::new();
        let mut attempts = 0;
        for attempt in 0..=self.cfg.retries {
            attempts = attempt + 1;
            match self.post_once(&body) {
                Ok(text) => {
                    self.record(TranscriptEntry { seq, attempts, request: body, response: Some(text.clone()), error: None });
                    return Ok(text);
                }
                Err(e) => {
                    log::warn!("request {seq} attempt {attempts} failed: {e}");
                    last = e;
                    if attempt < self.cfg.retries {
                        std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << attempt));
                    }
                }
            }
        }
        self.record(TranscriptEntry { seq, attempts, request: body, response: None, error: Some(last.clone()) });
        Err(Error::Transport { attempts, msg: last })
    }

    fn record(&self, e: TranscriptEntry) {
        self.transcript.lock().unwrap().push(e);
    }

    pub fn complete(&self, messages: Value) -> Result<String> {
        let seq = self.reserve(1);
        self.run(seq, messages)
    }

    /// Issues requests with at most `max_in_flight` concurrently; results
    /// come back in request order.
    pub fn complete_many(&self, batch: Vec<Value>) -> Vec<Result<String>> {
        let first = self.reserve(batch.len());
        let mut out: Vec<Option<Result<String>>> = (0..batch.len()).map(|_| None).collect();
        let width = self.cfg.max_in_flight.max(1);
        let indexed: Vec<(usize, Value)> = batch.into_iter().enumerate().collect();
        for chunk in indexed.chunks(width) {
            let results: Vec<(usize, Result<String>)> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(i, m)| s.spawn(move || (*i, self.run(first + i, m.clone()))))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("request thread panicked")).collect()
            });
            for (i, r) in results {
                out[i] = Some(r);
            }
        }
        out.into_iter().map(|r| r.expect("every request ran")).collect()
    }

    /// Transcript sorted by request sequence number.
    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        let mut t = self.transcript.lock().unwrap().clone();
        t.sort_by_key(|e| e.seq);
        t
    }

    pub fn save_transcript(&self, path: &Path) -> Result<()> {
        scene::write_jsonl(path, "corrloop.transcript", json!({ "model": self.cfg.model }), &self.transcript())
    }
}

/// PNG data URLs of five evenly spaced overlay frames, views side by side.
pub fn overlay_frames_png(record: &FailureRecord) -> Result<Vec<String>> {
    let r = &record.overlay;
    let (nv, nt, nc, h, w) = r.dims();
    let get = |v: usize, t: usize, c: usize, i: usize| if c < nc { r.plane(v, t, c)[i] } else { 0.0 };
    let mut urls = Vec::new();
    for k in 0..5 {
        let t = if nt > 1 { (k * (nt - 1) + 2) / 4 } else { 0 };
        let mut img = image::RgbImage::new((nv * w) as u32, h as u32);
        for v in 0..nv {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let px = [
                        get(v, t, CH_FOREGROUND, i).max(get(v, t, CH_PLAN, i)),
                        get(v, t, CH_ROAD, i).max(get(v, t, CH_PREDICTION, i)),
                        (0.5 * get(v, t, CH_AMBIENT, i)).max(get(v, t, CH_DETECTION, i)),
                    ];
                    img.put_pixel((v * w + x) as u32, y as u32, image::Rgb(px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)));
                }
            }
        }
        let mut buf = Vec::new();
        img.write_to(&mut Cursor::new(&mut buf), image::ImageFormat::Png)
            .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
        urls.push(format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(&buf)));
    }
    Ok(urls)
}

fn user_message(text: String, images: &[String]) -> Value {
    let mut content = vec![json!({ "type": "text", "text": text })];
    content.extend(images.iter().map(|u| json!({ "type": "image_url", "image_url": { "url": u } })));
    json!([{ "role": "user", "content": content }])
}

fn text_message(text: String) -> Value {
    json!([{ "role": "user", "content": text }])
}

/// First JSON object embedded in a reply.
fn embedded_json(text: &str) -> Option<Value> {
    let (a, b) = (text.find('{')?, text.rfind('}')?);
    serde_json::from_str(&text[a..=b]).ok()
}

const LEGEND: &str = "Each image shows the ego vehicle's bird's-eye views side by side. Red: objects and the \
planned trajectory; green: road lines and predicted object paths; blue: detected objects.";

/// Analyzer, extractor, summarizer and requirement writer backed by a
/// chat-completions endpoint.
pub struct HttpAnalyzer {
    pub client: HttpClient,
}

impl HttpAnalyzer {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl Analyzer for HttpAnalyzer {
    fn classify(&self, record: &FailureRecord, labels: &[String]) -> Result<BTreeMap<String, f64>> {
        let images = overlay_frames_png(record)?;
        let prompt = format!(
            "{LEGEND}\nThe planner collided at timestep {}. For each candidate failure cause in {:?}, give the \
             probability that it contributed. Reply with a JSON object mapping each cause to a number in [0, 1].",
            record.collision_time, labels
        );
        let votes = self.client.config().votes.max(1);
        let batch = (0..votes).map(|_| user_message(prompt.clone(), &images)).collect();
        let mut sums: BTreeMap<String, f64> = labels.iter().map(|l| (l.clone(), 0.0)).collect();
        for reply in self.client.complete_many(batch) {
            let v = embedded_json(&reply?).unwrap_or(Value::Null);
            for l in labels {
                let q = v.get(l).and_then(Value::as_f64).unwrap_or(0.0).clamp(0.0, 1.0);
                *sums.get_mut(l).unwrap() += q / votes as f64;
            }
        }
        Ok(sums)
    }

    fn describe(&self, record: &FailureRecord, h_class: &BTreeSet<String>) -> Result<String> {
        let images = overlay_frames_png(record)?;
        let prompt = format!(
            "{LEGEND}\nThe failure was attributed to {:?}. Describe in one sentence which scene factors of those \
             categories caused the planner to collide at timestep {}.",
            h_class, record.collision_time
        );
        self.client.complete(user_message(prompt, &images))
    }

    fn describe_direct(&self, record: &FailureRecord) -> Result<String> {
        let images = overlay_frames_png(record)?;
        let prompt = format!("{LEGEND}\nIn one sentence, why did the planner collide at timestep {}?", record.collision_time);
        self.client.complete(user_message(prompt, &images))
    }
}

impl Extractor for HttpAnalyzer {
    fn extract(&self, text: &str) -> Result<BTreeSet<String>> {
        let prompt = format!(
            "Extract the failure-cause keywords from this description. Reply with a comma-separated list of \
             lowercase keywords, words joined by underscores.\n\n{text}"
        );
        let reply = self.client.complete(text_message(prompt))?;
        Ok(reply
            .split([',', '\n'])
            .map(|k| k.trim().trim_matches(|c: char| !c.is_alphanumeric() && c != '_').to_lowercase().replace(' ', "_"))
            .filter(|k| !k.is_empty())
            .collect())
    }
}

impl Summarizer for HttpAnalyzer {
    fn summarize(&self, members: &[String]) -> Result<Label> {
        let prompt = format!(
            "These keywords describe driving-planner failure causes: {members:?}. Name their common category with \
             one word (for example Weather, Foreground or Background)."
        );
        let reply = self.client.complete(text_message(prompt))?;
        let label = reply.split_whitespace().next().unwrap_or("other").trim_matches(|c: char| !c.is_alphanumeric());
        Ok(Label { flagged: label.is_empty(), label: if label.is_empty() { "other".into() } else { label.to_string() } })
    }
}

impl RequirementWriter for HttpAnalyzer {
    fn write(&self, h_class: &BTreeSet<String>, h_desc: &str) -> Result<(String, BTreeSet<String>)> {
        let prompt = format!(
            "A driving planner failed. Cause categories: {h_class:?}. Analysis: {h_desc}\nWrite a data requirement \
             for training scenes that would fix this failure. Reply as JSON: {{\"requirement\": text, \
             \"keywords\": [lowercase keywords joined by underscores]}}."
        );
        let reply = self.client.complete(text_message(prompt))?;
        let v = embedded_json(&reply).ok_or_else(|| Error::invalid(format!("requirement reply is not JSON: {reply}")))?;
        let text = v.get("requirement").and_then(Value::as_str).unwrap_or_default().to_string();
        let keywords = v
            .get("keywords")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(|s| s.trim().to_lowercase().replace(' ', "_")).collect())
            .unwrap_or_default();
        Ok((text, keywords))
    }
}
