use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::PromptError;
use crate::bins::{DayType, TimeBin, BINS_PER_DAY};
use crate::ingest::{FlowDirection, FlowSeries};

pub const DATA_BLOCK_START: &str = "<<<FORECAST_DATA";
pub const DATA_BLOCK_END: &str = "FORECAST_DATA>>>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub date: NaiveDate,
    pub bin: u16,
    pub value: u32,
}

/// Same-bin values from an earlier day of the same day type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparableDay {
    pub date: NaiveDate,
    pub day_type: DayType,
    /// `[bin, value]` pairs in bin order.
    pub values: Vec<(u16, u32)>,
}

impl ComparableDay {
    pub fn value_at(&self, bin: u16) -> Option<u32> {
        self.values
            .binary_search_by_key(&bin, |(b, _)| *b)
            .ok()
            .map(|i| self.values[i].1)
    }
}

/// Every number a prompt mentions, in machine-readable form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataBlock {
    pub task_id: String,
    pub station: String,
    pub direction: FlowDirection,
    pub horizon: usize,
    pub target_date: NaiveDate,
    pub target_bins: Vec<u16>,
    /// The `d` most recent observations, oldest first.
    pub history: Vec<Observation>,
    /// Most recent first.
    pub comparable_days: Vec<ComparableDay>,
}

impl DataBlock {
    /// Delimited single-line JSON, ready to embed in prompt text.
    pub fn embed(&self) -> String {
        format!(
            "{DATA_BLOCK_START}\n{}\n{DATA_BLOCK_END}",
            serde_json::to_string(self).expect("data block serialises")
        )
    }

    /// Finds and parses the block embedded in `text`.
    pub fn extract(text: &str) -> Result<Self, PromptError> {
        let start = text
            .find(DATA_BLOCK_START)
            .ok_or_else(|| PromptError::MalformedDataBlock("start marker not found".into()))?;
        let body_start = start + DATA_BLOCK_START.len();
        let len = text[body_start..]
            .find(DATA_BLOCK_END)
            .ok_or_else(|| PromptError::MalformedDataBlock("end marker not found".into()))?;
        let block: DataBlock = serde_json::from_str(text[body_start..body_start + len].trim())
            .map_err(|e| PromptError::MalformedDataBlock(e.to_string()))?;
        block.check()?;
        Ok(block)
    }

    fn check(&self) -> Result<(), PromptError> {
        if self.horizon == 0 || self.target_bins.len() != self.horizon {
            return Err(PromptError::MalformedDataBlock(format!(
                "horizon {} with {} target bins",
                self.horizon,
                self.target_bins.len()
            )));
        }
        if self.history.is_empty() {
            return Err(PromptError::MalformedDataBlock("empty history".into()));
        }
        if self.target_bins.iter().any(|b| *b >= BINS_PER_DAY) {
            return Err(PromptError::MalformedDataBlock("target bin out of range".into()));
        }
        Ok(())
    }

    pub fn last_observed(&self) -> u32 {
        self.history.last().map(|o| o.value).unwrap_or(0)
    }
}

/// Earlier dates of the same day type as `target`, present in `series`,
/// most recent first, at most `limit` of them.
pub(crate) fn comparable_dates(series: &FlowSeries, target: NaiveDate, limit: usize) -> Vec<NaiveDate> {
    let day_type = DayType::of(target);
    series
        .dates()
        .into_iter()
        .rev()
        .filter(|d| *d < target && DayType::of(*d) == day_type)
        .take(limit)
        .collect()
}

/// Values of `series` on `date` for bins `[from, to]`.
pub(crate) fn day_slice(series: &FlowSeries, date: NaiveDate, from: u16, to: u16) -> Vec<(u16, u32)> {
    (from..=to)
        .filter_map(|b| {
            let bin = TimeBin::new(date, b)?;
            series.get(&bin).map(|v| (b, v))
        })
        .collect()
}
