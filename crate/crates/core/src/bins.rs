//! Ten-minute service-day bins.
//!
//! A service day runs from 06:00 up to (not including) 24:00, which gives
//! 18 hours × 6 bins = 108 bins. Bin 0 covers 06:00–06:09 and bin 107 covers
//! 23:50–23:59.

use std::fmt;

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

/// First service hour of the day.
pub const SERVICE_START_HOUR: u32 = 6;
/// Width of a bin in minutes.
pub const BIN_MINUTES: u32 = 10;
/// Number of bins in one service day.
pub const BINS_PER_DAY: u16 = 108;

/// One ten-minute slot of a service day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeBin {
    pub service_date: NaiveDate,
    pub bin_index: u16,
}

impl TimeBin {
    /// Returns `None` when `bin_index` is outside `0..108`.
    pub fn new(service_date: NaiveDate, bin_index: u16) -> Option<Self> {
        (bin_index < BINS_PER_DAY).then_some(Self {
            service_date,
            bin_index,
        })
    }

    /// Bin containing `ts`, or `None` for timestamps before 06:00.
    pub fn from_datetime(ts: NaiveDateTime) -> Option<Self> {
        let hour = ts.hour();
        if hour < SERVICE_START_HOUR {
            return None;
        }
        let minutes = (hour - SERVICE_START_HOUR) * 60 + ts.minute();
        let index = u16::try_from(minutes / BIN_MINUTES).ok()?;
        Self::new(ts.date(), index)
    }

    pub fn start_time(&self) -> NaiveTime {
        let minutes = SERVICE_START_HOUR * 60 + u32::from(self.bin_index) * BIN_MINUTES;
        NaiveTime::from_hms_opt(minutes / 60, minutes % 60, 0).expect("bin start is a valid clock time")
    }

    /// Minutes after midnight at which the bin starts.
    pub fn start_minute(&self) -> u32 {
        SERVICE_START_HOUR * 60 + u32::from(self.bin_index) * BIN_MINUTES
    }

    /// Next bin in service order; bin 107 is followed by bin 0 of the next day.
    pub fn succ(&self) -> Self {
        if self.bin_index + 1 < BINS_PER_DAY {
            Self {
                service_date: self.service_date,
                bin_index: self.bin_index + 1,
            }
        } else {
            Self {
                service_date: self.service_date.succ_opt().expect("date in range"),
                bin_index: 0,
            }
        }
    }

    /// Previous bin in service order; bin 0 is preceded by bin 107 of the prior day.
    pub fn pred(&self) -> Self {
        if self.bin_index > 0 {
            Self {
                service_date: self.service_date,
                bin_index: self.bin_index - 1,
            }
        } else {
            Self {
                service_date: self.service_date.pred_opt().expect("date in range"),
                bin_index: BINS_PER_DAY - 1,
            }
        }
    }

    pub fn day_type(&self) -> DayType {
        DayType::of(self.service_date)
    }

    /// Formats the bin start as `HH:MM`.
    pub fn clock_label(&self) -> String {
        self.start_time().format("%H:%M").to_string()
    }
}

impl fmt::Display for TimeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.service_date, self.clock_label())
    }
}

/// Weekday/weekend classification used to pick comparable days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DayType {
    Weekday,
    Weekend,
}

impl DayType {
    pub fn of(date: NaiveDate) -> Self {
        match date.weekday() {
            Weekday::Sat | Weekday::Sun => DayType::Weekend,
            _ => DayType::Weekday,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DayType::Weekday => "weekday",
            DayType::Weekend => "weekend",
        }
    }
}

/// Inclusive range of calendar dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn is_empty(&self) -> bool {
        self.start > self.end
    }

    pub fn overlaps(&self, other: &DateRange) -> bool {
        !self.is_empty() && !other.is_empty() && self.start <= other.end && other.start <= self.end
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.start.iter_days().take_while(move |d| *d <= self.end)
    }
}
