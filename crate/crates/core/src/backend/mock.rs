use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::reply::{format_reply, parse_reply_with, ReplyPolicy};
use super::{BackendError, ForecastBackend, ForecastResult};
use crate::prompt::{DataBlock, RenderedPrompt};

/// Fault injection knobs for the deterministic backend.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    /// Added to every prediction before the reply is written.
    pub additive: i64,
    /// Templates whose prompts fail as if the backend were down.
    pub fail_template_ids: Vec<String>,
}

/// Seasonal-naive rule on a data block: each target bin takes the same-bin
/// value from the most recent comparable day that has it, else the last
/// observed value.
pub fn mock_forecast(block: &DataBlock) -> Vec<u32> {
    let mut days: Vec<_> = block.comparable_days.iter().collect();
    days.sort_by_key(|d| std::cmp::Reverse(d.date));
    block
        .target_bins
        .iter()
        .map(|&bin| {
            days.iter()
                .find_map(|d| d.value_at(bin))
                .unwrap_or_else(|| block.last_observed())
        })
        .collect()
}

/// Offline backend that reads the prompt's data block and answers with the
/// seasonal-naive forecast, optionally perturbed.
#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockConfig,
    max_in_flight: usize,
    policy: ReplyPolicy,
}

impl MockBackend {
    pub fn new(config: MockConfig, max_in_flight: usize) -> Self {
        Self {
            config,
            max_in_flight: max_in_flight.max(1),
            policy: ReplyPolicy::default(),
        }
    }

    pub fn with_policy(mut self, policy: ReplyPolicy) -> Self {
        self.policy = policy;
        self
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(MockConfig::default(), 4)
    }
}

impl ForecastBackend for MockBackend {
    fn backend_id(&self) -> String {
        if self.config.additive == 0 {
            "deterministic-mock".to_string()
        } else {
            format!("deterministic-mock{:+}", self.config.additive)
        }
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn forecast(&self, prompt: &RenderedPrompt) -> Result<ForecastResult, BackendError> {
        let started = Instant::now();
        if self.config.fail_template_ids.contains(&prompt.template_id) {
            return Err(BackendError::Injected(prompt.template_id.clone()));
        }
        let block = DataBlock::extract(&prompt.text).map_err(|e| BackendError::MalformedPrompt(e.to_string()))?;
        let values: Vec<i64> = mock_forecast(&block)
            .into_iter()
            .map(|v| i64::from(v) + self.config.additive)
            .collect();
        let raw = format_reply(&block.task_id, &values);
        let predictions = parse_reply_with(&raw, prompt.task.horizon, &self.policy).map_err(|source| {
            BackendError::MalformedReply {
                source,
                raw_reply: raw.clone(),
            }
        })?;
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
