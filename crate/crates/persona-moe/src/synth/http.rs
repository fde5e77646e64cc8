//! HTTP generation backend for a completion-style endpoint.
//!
//! Each record costs three POSTs (cues, traits, response). Completions are
//! free text carrying `##`-headed sections; the parsers here accept exact
//! section names and exact pole labels, rejecting anything else, so a
//! rambling model cannot smuggle malformed records into the corpus.
//!
//! Credentials are read from an environment variable at call time and are
//! never persisted: they appear in no record, no stats file, and no error
//! message.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::pole::{TraitActivation, TraitPole};
use crate::synth::backend::GeneratorBackend;

/// Connection settings. `api_key_env` names the variable holding the
/// bearer token; the value itself never enters this struct.
#[derive(Clone, Debug)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub api_key_env: Option<String>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: "http://127.0.0.1:8080/v1/complete".into(),
            model: "persona-synth".into(),
            timeout_secs: 30,
            max_retries: 3,
            api_key_env: None,
        }
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct Completion {
    completion: String,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Backend(format!("client setup failed: {e}")))?;
        Ok(HttpBackend { cfg, client })
    }

    fn bearer(&self) -> Result<Option<String>> {
        match &self.cfg.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| Error::Backend(format!("credential variable {var} is not set"))),
        }
    }

    /// POST one prompt, retrying transient failures with capped
    /// exponential backoff (100ms doubling, capped at 2s).
    fn complete(&self, prompt: &str, seed: u64) -> Result<String> {
        let token = self.bearer()?;
        let body = json!({ "model": self.cfg.model, "prompt": prompt, "seed": seed });
        let mut last_err = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let backoff = 100u64.saturating_mul(1 << (attempt - 1)).min(2_000);
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let mut req = self.client.post(&self.cfg.endpoint).json(&body);
            if let Some(tok) = &token {
                req = req.bearer_auth(tok);
            }
            match req.send() {
                Err(e) => last_err = format!("transport: {e}"),
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let parsed: Completion = resp
                            .json()
                            .map_err(|e| Error::Backend(format!("completion body was not JSON: {e}")))?;
                        return Ok(parsed.completion);
                    }
                    last_err = format!("endpoint returned status {status}");
                    if status.is_client_error() && status != reqwest::StatusCode::TOO_MANY_REQUESTS {
                        break;
                    }
                }
            }
        }
        Err(Error::Backend(last_err))
    }
}

/// Text of `raw` under `header`, up to the next `##` section or the end.
fn section<'a>(raw: &'a str, header: &str) -> Option<&'a str> {
    let start = raw.find(header)? + header.len();
    let rest = &raw[start..];
    let end = rest.find("##").unwrap_or(rest.len());
    let body = rest[..end].trim();
    if body.is_empty() {
        None
    } else {
        Some(body)
    }
}

fn missing(section_name: &str, raw: &str) -> Error {
    Error::ParseCompletion {
        reason: format!("completion lacks a non-empty {section_name} section"),
        raw: raw.to_string(),
    }
}

impl GeneratorBackend for HttpBackend {
    fn detect_situation_cues(&self, query: &str, seed: u64) -> Result<(String, String)> {
        if query.trim().is_empty() {
            return Err(Error::InvalidInput("query must be non-empty".into()));
        }
        let prompt = format!(
            "Read the user query below and describe its situational context.\n\
             Reply with exactly two sections:\n\
             ##Social Cue: one sentence on the speaker's interpersonal state.\n\
             ##Task Cue: one sentence on what kind of work the reply must do.\n\
             \nQuery: {query}\n"
        );
        let raw = self.complete(&prompt, seed)?;
        let social = section(&raw, "##Social Cue:").ok_or_else(|| missing("##Social Cue:", &raw))?;
        let task = section(&raw, "##Task Cue:").ok_or_else(|| missing("##Task Cue:", &raw))?;
        Ok((social.to_string(), task.to_string()))
    }

    fn identify_traits(&self, social_cue: &str, task_cue: &str, seed: u64) -> Result<Vec<TraitPole>> {
        if social_cue.trim().is_empty() || task_cue.trim().is_empty() {
            return Err(Error::InvalidInput("cues must be non-empty".into()));
        }
        let labels: Vec<&str> = TraitPole::ALL.iter().map(|p| p.label()).collect();
        let prompt = format!(
            "Given these situation cues, pick which persona trait poles should be active.\n\
             Social cue: {social_cue}\nTask cue: {task_cue}\n\
             Choose from: {}.\n\
             Reply with one section:\n##Traits: comma-separated pole names only.\n",
            labels.join(", ")
        );
        let raw = self.complete(&prompt, seed)?;
        let body = section(&raw, "##Traits:").ok_or_else(|| missing("##Traits:", &raw))?;
        let mut poles = Vec::new();
        for piece in body.split(',') {
            let name = piece.trim();
            if name.is_empty() || name.eq_ignore_ascii_case("none") {
                continue;
            }
            let pole = TraitPole::parse(name).map_err(|_| Error::ParseCompletion {
                reason: format!("unknown pole name {name:?}"),
                raw: raw.clone(),
            })?;
            poles.push(pole);
        }
        Ok(poles)
    }

    fn generate_response(
        &self,
        query: &str,
        social_cue: &str,
        task_cue: &str,
        traits: &TraitActivation,
        seed: u64,
    ) -> Result<String> {
        let labels: Vec<&str> = traits.poles().iter().map(|p| p.label()).collect();
        let prompt = format!(
            "Write a reply to the query below in the persona given by the active trait poles.\n\
             Query: {query}\nSocial cue: {social_cue}\nTask cue: {task_cue}\n\
             Active poles: {}.\n\
             Reply with these sections:\n\
             ##Response: the styled reply text.\n\
             ##Persona Behavior Rationale: one sentence on how the poles shaped it.\n",
            labels.join(", ")
        );
        let raw = self.complete(&prompt, seed)?;
        let body = section(&raw, "##Response:").ok_or_else(|| missing("##Response:", &raw))?;
        Ok(body.to_string())
    }
}
