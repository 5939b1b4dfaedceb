use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::reply::parse_reply_with;
use super::{BackendConfig, BackendError, ForecastBackend, ForecastResult};
use crate::prompt::RenderedPrompt;

/// The only place the API key is read from.
pub const API_KEY_ENV: &str = "DELAYFLOW_API_KEY";

const SYSTEM_PROMPT: &str = "You are a metro passenger flow forecasting assistant. Answer with the requested JSON object only.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// OpenAI-compatible chat-completions request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn for_prompt(config: &BackendConfig, prompt: &RenderedPrompt) -> Self {
        Self {
            model: config.model_name.clone(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: SYSTEM_PROMPT.into(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: prompt.text.clone(),
                },
            ],
            temperature: config.temperature,
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(String),
}

pub struct RemoteChatBackend {
    config: BackendConfig,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemoteChatBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteChatBackend")
            .field("endpoint", &self.config.endpoint_url)
            .field("model", &self.config.model_name)
            .finish_non_exhaustive()
    }
}

impl RemoteChatBackend {
    /// Reads the key from `DELAYFLOW_API_KEY`.
    pub fn from_env(config: BackendConfig) -> Result<Self, BackendError> {
        Self::from_lookup(config, |name| std::env::var(name).ok())
    }

    pub(crate) fn from_lookup(
        config: BackendConfig,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, BackendError> {
        match lookup(API_KEY_ENV) {
            Some(key) if !key.trim().is_empty() => Self::new(config, key),
            _ => Err(BackendError::MissingCredentials(API_KEY_ENV)),
        }
    }

    pub fn new(config: BackendConfig, api_key: String) -> Result<Self, BackendError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { config, api_key, client })
    }

    fn attempt(&self, body: &ChatRequest) -> Attempt {
        let response = match self
            .client
            .post(&self.config.endpoint_url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
        {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if !status.is_success() {
            return Attempt::Fatal(format!("HTTP {status}"));
        }
        match response.json::<ChatResponse>() {
            Ok(parsed) => match parsed.choices.into_iter().next() {
                Some(choice) => Attempt::Done(choice.message.content),
                None => Attempt::Fatal("response has no choices".into()),
            },
            Err(e) => Attempt::Fatal(format!("unreadable response body: {e}")),
        }
    }
}

impl ForecastBackend for RemoteChatBackend {
    fn backend_id(&self) -> String {
        format!("remote-chat:{}", self.config.model_name)
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }

    fn forecast(&self, prompt: &RenderedPrompt) -> Result<ForecastResult, BackendError> {
        let started = Instant::now();
        let body = ChatRequest::for_prompt(&self.config, prompt);
        let max = self.config.retry.max_attempts;
        let mut last_error: String;
        let mut attempts = 0;
        let raw = loop {
            attempts += 1;
            match self.attempt(&body) {
                Attempt::Done(raw) => break raw,
                Attempt::Fatal(e) => {
                    return Err(BackendError::Unavailable {
                        attempts,
                        last_error: e,
                    })
                }
                Attempt::Retry(e) => {
                    log::warn!("attempt {attempts}/{max} for {} failed: {e}", prompt.task.task_id);
                    last_error = e;
                }
            }
            if attempts >= max {
                return Err(BackendError::Unavailable { attempts, last_error });
            }
            thread::sleep(self.config.retry.backoff(attempts));
        };
        let predictions = parse_reply_with(&raw, prompt.task.horizon, &self.config.reply_policy()).map_err(
            |source| BackendError::MalformedReply {
                source,
                raw_reply: raw.clone(),
            },
        )?;
        ForecastResult::new(
            &prompt.task,
            predictions,
            &prompt.template_id,
            self.backend_id(),
            raw.clone(),
            started.elapsed(),
        )
        .map_err(|source| BackendError::MalformedReply { source, raw_reply: raw })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendKind, ForecastTask, ReplyError, RetryPolicy};
    use crate::bins::TimeBin;
    use crate::ingest::FlowDirection;
    use crate::prompt::{ComparableDay, DataBlock, Observation};
    use chrono::NaiveDate;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    fn prompt() -> RenderedPrompt {
        let d = NaiveDate::from_ymd_opt(2019, 9, 19).unwrap();
        let task = ForecastTask::new("t1", "S", FlowDirection::Inflow, TimeBin::new(d, 10).unwrap(), 1, 2).unwrap();
        let block = DataBlock {
            task_id: "t1".into(),
            station: "S".into(),
            direction: FlowDirection::Inflow,
            horizon: 2,
            target_date: d,
            target_bins: vec![11, 12],
            history: vec![Observation { date: d, bin: 10, value: 3 }],
            comparable_days: Vec::<ComparableDay>::new(),
        };
        RenderedPrompt {
            template_id: "tpl".into(),
            text: format!("Forecast.\n{}", block.embed()),
            data_block: block,
            task,
        }
    }

    fn config(url: String) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::RemoteChat,
            endpoint_url: url,
            retry: RetryPolicy {
                max_attempts: 3,
                backoff_base_ms: 1,
            },
            timeout_secs: 5,
            ..BackendConfig::default()
        }
    }

    /// Serves the canned (status, body) pairs in order, recording request bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (url, seen)
    }

    fn completion(content: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    #[test]
    fn retries_then_succeeds() {
        let (url, seen) = serve(vec![
            (500, "{}".into()),
            (200, completion("Here: {\"task_id\":\"t1\",\"predictions\":[4,5.5]}")),
        ]);
        let backend = RemoteChatBackend::new(config(url), "k".into()).unwrap();
        let result = backend.forecast(&prompt()).unwrap();
        assert_eq!(result.predictions(), &[4, 6]);
        assert!(result.raw_reply().starts_with("Here:"));
        let bodies = seen.lock().unwrap();
        assert_eq!(bodies.len(), 2);
        let sent: ChatRequest = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent.model, "gpt-4");
        assert_eq!(sent.temperature, 0.0);
        assert!(sent.messages[1].content.contains("FORECAST_DATA"));
    }

    #[test]
    fn negative_reply_is_malformed() {
        let (url, _) = serve(vec![(200, completion("{\"predictions\":[5,-1]}"))]);
        let backend = RemoteChatBackend::new(config(url), "k".into()).unwrap();
        match backend.forecast(&prompt()) {
            Err(BackendError::MalformedReply { source, raw_reply }) => {
                assert_eq!(source, ReplyError::NegativeValue { index: 1, value: -1.0 });
                assert!(raw_reply.contains("-1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen) = serve(vec![(401, "{}".into())]);
        let backend = RemoteChatBackend::new(config(url), "k".into()).unwrap();
        assert!(matches!(
            backend.forecast(&prompt()),
            Err(BackendError::Unavailable { attempts: 1, .. })
        ));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn unreachable_endpoint_exhausts_attempts() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        drop(listener);
        let backend = RemoteChatBackend::new(config(url), "k".into()).unwrap();
        assert!(matches!(
            backend.forecast(&prompt()),
            Err(BackendError::Unavailable { attempts: 3, .. })
        ));
    }

    #[test]
    fn key_comes_from_the_environment_lookup() {
        let cfg = config("http://127.0.0.1:9/".into());
        assert!(matches!(
            RemoteChatBackend::from_lookup(cfg.clone(), |_| None),
            Err(BackendError::MissingCredentials(API_KEY_ENV))
        ));
        assert!(RemoteChatBackend::from_lookup(cfg, |name| (name == API_KEY_ENV).then(|| "k".into())).is_ok());
    }
}
