//! Forecast backends: the deterministic seasonal-naive simulator and an
//! OpenAI-compatible chat-completions client, plus reply validation.

mod mock;
mod remote;
mod reply;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bins::{TimeBin, BINS_PER_DAY};
use crate::ingest::FlowDirection;
use crate::prompt::RenderedPrompt;

pub use mock::{mock_forecast, MockBackend, MockConfig};
pub use remote::{ChatMessage, ChatRequest, RemoteChatBackend, API_KEY_ENV};
pub use reply::{format_reply, parse_reply, parse_reply_with, ReplyError, ReplyPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("history length must be at least 1")]
    EmptyHistory,
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("forecast window after {anchor} with horizon {horizon} crosses the end of the service day")]
    CrossesServiceDay { anchor: TimeBin, horizon: usize },
}

/// One forecasting job: predict `horizon` bins after `anchor` from the
/// `history_len` bins ending at `anchor`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForecastTask {
    pub task_id: String,
    pub station_id: String,
    pub direction: FlowDirection,
    pub anchor: TimeBin,
    pub history_len: usize,
    pub horizon: usize,
}

impl ForecastTask {
    /// The forecast window must lie within one service day.
    pub fn new(
        task_id: impl Into<String>,
        station_id: impl Into<String>,
        direction: FlowDirection,
        anchor: TimeBin,
        history_len: usize,
        horizon: usize,
    ) -> Result<Self, TaskError> {
        if history_len == 0 {
            return Err(TaskError::EmptyHistory);
        }
        if horizon == 0 {
            return Err(TaskError::EmptyHorizon);
        }
        let first = anchor.succ();
        if usize::from(first.bin_index) + horizon > usize::from(BINS_PER_DAY) {
            return Err(TaskError::CrossesServiceDay { anchor, horizon });
        }
        Ok(Self {
            task_id: task_id.into(),
            station_id: station_id.into(),
            direction,
            anchor,
            history_len,
            horizon,
        })
    }

    /// Conventional id: `{station}_{direction}_{date}_{first target bin}`.
    pub fn standard_id(station: &str, direction: FlowDirection, first_target: TimeBin) -> String {
        format!(
            "{station}_{direction}_{}_{:03}",
            first_target.service_date, first_target.bin_index
        )
    }

    pub fn target_bins(&self) -> Vec<TimeBin> {
        let mut out = Vec::with_capacity(self.horizon);
        let mut bin = self.anchor;
        for _ in 0..self.horizon {
            bin = bin.succ();
            out.push(bin);
        }
        out
    }

    pub fn first_target(&self) -> TimeBin {
        self.anchor.succ()
    }
}

/// A validated forecast. Counts are unsigned and the length always matches
/// the task horizon, so impossible negative values cannot be represented.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ForecastResult {
    task_id: String,
    predictions: Vec<u32>,
    template_id: String,
    backend_id: String,
    raw_reply: String,
    #[serde(skip)]
    latency: Duration,
}

impl ForecastResult {
    pub fn new(
        task: &ForecastTask,
        predictions: Vec<u32>,
        template_id: impl Into<String>,
        backend_id: impl Into<String>,
        raw_reply: impl Into<String>,
        latency: Duration,
    ) -> Result<Self, ReplyError> {
        if predictions.len() != task.horizon {
            return Err(ReplyError::WrongLength {
                expected: task.horizon,
                got: predictions.len(),
            });
        }
        Ok(Self {
            task_id: task.task_id.clone(),
            predictions,
            template_id: template_id.into(),
            backend_id: backend_id.into(),
            raw_reply: raw_reply.into(),
            latency,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn predictions(&self) -> &[u32] {
        &self.predictions
    }

    pub fn template_id(&self) -> &str {
        &self.template_id
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn raw_reply(&self) -> &str {
        &self.raw_reply
    }

    pub fn latency(&self) -> Duration {
        self.latency
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("malformed reply ({source}); raw reply: {raw_reply}")]
    MalformedReply {
        #[source]
        source: ReplyError,
        raw_reply: String,
    },
    #[error("malformed prompt: {0}")]
    MalformedPrompt(String),
    #[error("missing credentials: set {0}")]
    MissingCredentials(&'static str),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("injected failure for template {0}")]
    Injected(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    RemoteChat,
    DeterministicMock,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mock" | "deterministic-mock" => Ok(BackendKind::DeterministicMock),
            "remote" | "remote-chat" => Ok(BackendKind::RemoteChat),
            other => Err(format!("unknown backend kind '{other}' (expected mock or remote)")),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::RemoteChat => "remote-chat",
            BackendKind::DeterministicMock => "deterministic-mock",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): base × 2^(attempt-1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1 << attempt.saturating_sub(1).min(16)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
    /// Requires temperature 0.
    pub reproducible: bool,
    /// Clamp negative predictions to zero instead of rejecting the reply.
    pub clamp_negative: bool,
    pub mock: MockConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::DeterministicMock,
            endpoint_url: "https://api.openai.com/v1/chat/completions".to_string(),
            model_name: "gpt-4".to_string(),
            temperature: 0.0,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            timeout_secs: 60,
            reproducible: true,
            clamp_negative: false,
            mock: MockConfig::default(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be positive".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry.max_attempts must be positive".into()));
        }
        if self.reproducible && self.temperature != 0.0 {
            return Err(BackendError::Config(format!(
                "temperature must be 0 in reproducible mode, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn reply_policy(&self) -> ReplyPolicy {
        ReplyPolicy {
            clamp_negative: self.clamp_negative,
        }
    }
}

/// Anything that can turn a rendered prompt into a validated forecast.
pub trait ForecastBackend: Send + Sync {
    fn backend_id(&self) -> String;

    /// Upper bound on concurrent requests.
    fn max_in_flight(&self) -> usize;

    fn forecast(&self, prompt: &RenderedPrompt) -> Result<ForecastResult, BackendError>;
}

/// Builds the backend described by `config`. The remote client reads its key
/// from the environment.
pub fn backend_from_config(config: &BackendConfig) -> Result<Box<dyn ForecastBackend>, BackendError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::DeterministicMock => Box::new(MockBackend::new(config.mock.clone(), config.max_in_flight)),
        BackendKind::RemoteChat => Box::new(RemoteChatBackend::from_env(config.clone())?),
    })
}

/// One-shot forecast through the backend described by `config`.
pub fn forecast(prompt: &RenderedPrompt, config: &BackendConfig) -> Result<ForecastResult, BackendError> {
    backend_from_config(config)?.forecast(prompt)
}
