//! Classical comparison forecasters: historical average, seasonal naive and
//! an autoregression on differenced within-day series.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ForecastTask;
use crate::bins::{DateRange, DayType, TimeBin, BINS_PER_DAY};
use crate::ingest::{FlowDirection, FlowSeries};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("history underflow for task {task_id}: needs {needed} bins ending at {anchor}")]
    HistoryUnderflow { task_id: String, needed: usize, anchor: TimeBin },
    #[error("model for {model_station}/{model_direction} cannot forecast {task_station}/{task_direction}")]
    SeriesMismatch {
        model_station: String,
        model_direction: FlowDirection,
        task_station: String,
        task_direction: FlowDirection,
    },
    #[error("least-squares solve failed: {0}")]
    Solve(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    HistoricalAverage,
    SeasonalNaive,
    Arima,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::HistoricalAverage,
        BaselineKind::SeasonalNaive,
        BaselineKind::Arima,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            BaselineKind::HistoricalAverage => "HistoricalAverage",
            BaselineKind::SeasonalNaive => "SeasonalNaive",
            BaselineKind::Arima => "ARIMA",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "historical-average" | "historicalaverage" | "ha" => Ok(BaselineKind::HistoricalAverage),
            "seasonal-naive" | "seasonalnaive" | "naive" | "sn" => Ok(BaselineKind::SeasonalNaive),
            "arima" | "ar" => Ok(BaselineKind::Arima),
            other => Err(format!("unknown baseline '{other}'")),
        }
    }
}

/// Autoregression order `p` on the `d`-times differenced series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArimaParams {
    pub p: usize,
    pub d: usize,
}

impl Default for ArimaParams {
    fn default() -> Self {
        Self { p: 6, d: 1 }
    }
}

impl ArimaParams {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.p == 0 {
            return Err(BaselineError::InvalidParams("p must be at least 1".into()));
        }
        if self.d > 1 {
            return Err(BaselineError::InvalidParams("d must be 0 or 1".into()));
        }
        Ok(())
    }
}

/// Fitted autoregression: `y_t = intercept + Σ coefficients[i] · y_{t-1-i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub p: usize,
    pub d: usize,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Residual standard deviation.
    pub sigma: f64,
    pub n_obs: usize,
}

impl ArModel {
    /// Long-run mean of the differenced series implied by the coefficients.
    pub fn implied_mean(&self) -> f64 {
        self.intercept / (1.0 - self.coefficients.iter().sum::<f64>())
    }

    /// Rolls the recursion forward `u` steps from `levels` (oldest first),
    /// feeding predictions back in. Returns unclamped levels.
    pub fn forecast_levels(&self, levels: &[f64], u: usize) -> Result<Vec<f64>, BaselineError> {
        if levels.len() < self.p + self.d {
            return Err(BaselineError::InsufficientData(format!(
                "need {} observations, got {}",
                self.p + self.d,
                levels.len()
            )));
        }
        let mut work = difference(levels, self.d);
        let mut last_level = *levels.last().expect("non-empty");
        let mut out = Vec::with_capacity(u);
        for _ in 0..u {
            let n = work.len();
            let next = self.intercept
                + self
                    .coefficients
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c * work[n - 1 - i])
                    .sum::<f64>();
            work.push(next);
            let level = if self.d == 1 { last_level + next } else { next };
            last_level = level;
            out.push(level);
        }
        Ok(out)
    }
}

fn difference(xs: &[f64], d: usize) -> Vec<f64> {
    let mut v = xs.to_vec();
    for _ in 0..d {
        v = v.windows(2).map(|w| w[1] - w[0]).collect();
    }
    v
}

/// Ordinary least squares AR(p) on each day's `d`-times differenced values.
/// Differencing and lags never cross a day boundary.
pub fn fit_ar(days: &[Vec<f64>], p: usize, d: usize) -> Result<ArModel, BaselineError> {
    ArimaParams { p, d }.validate()?;
    let mut rows: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for day in days {
        if day.len() < p + d + 1 {
            continue;
        }
        let y = difference(day, d);
        for t in p..y.len() {
            rows.push(1.0);
            for lag in 1..=p {
                rows.push(y[t - lag]);
            }
            targets.push(y[t]);
        }
    }
    let n = targets.len();
    if n < p + 1 {
        return Err(BaselineError::InsufficientData(format!(
            "AR({p}) with d={d} needs at least {} usable rows, got {n}",
            p + 1
        )));
    }
    let x = DMatrix::from_row_slice(n, p + 1, &rows);
    let b = DVector::from_vec(targets);
    let beta = x
        .clone()
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| BaselineError::Solve(e.to_string()))?;
    let resid = &b - &x * &beta;
    let dof = n.saturating_sub(p + 1).max(1);
    Ok(ArModel {
        p,
        d,
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        sigma: (resid.norm_squared() / dof as f64).sqrt(),
        n_obs: n,
    })
}

/// Same-bin value from the most recent earlier day of the same day type;
/// falls back to the last observed value.
pub fn seasonal_naive(series: &FlowSeries, task: &ForecastTask) -> Result<Vec<u32>, BaselineError> {
    let history = series
        .window_ending(task.anchor, task.history_len)
        .ok_or_else(|| underflow(task, task.history_len))?;
    let last = history.last().map(|(_, v)| *v).unwrap_or(0);
    let target_date = task.first_target().service_date;
    let kind = DayType::of(target_date);
    let prior: Vec<NaiveDate> = series
        .dates()
        .into_iter()
        .rev()
        .filter(|d| *d < target_date && DayType::of(*d) == kind)
        .collect();
    Ok(task
        .target_bins()
        .iter()
        .map(|bin| {
            prior
                .iter()
                .find_map(|d| series.get(&TimeBin::new(*d, bin.bin_index).expect("bin in range")))
                .unwrap_or(last)
        })
        .collect())
}

fn underflow(task: &ForecastTask, needed: usize) -> BaselineError {
    BaselineError::HistoryUnderflow {
        task_id: task.task_id.clone(),
        needed,
        anchor: task.anchor,
    }
}

/// Per-bin training means by day type, with an all-days fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMeans {
    pub weekday: Vec<Option<f64>>,
    pub weekend: Vec<Option<f64>>,
    pub any: Vec<Option<f64>>,
}

impl BinMeans {
    pub fn mean(&self, day_type: DayType, bin: u16) -> Option<f64> {
        let i = usize::from(bin);
        let typed = match day_type {
            DayType::Weekday => self.weekday[i],
            DayType::Weekend => self.weekend[i],
        };
        typed.or(self.any[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FittedState {
    HistoricalAverage(BinMeans),
    SeasonalNaive,
    Arima(ArModel),
}

/// A fitted baseline for one station and direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub station_id: String,
    pub direction: FlowDirection,
    pub training: DateRange,
    pub state: FittedState,
}

/// Fits `kind` on the training dates of `series`. Nothing outside
/// `training` is read.
pub fn fit(
    kind: BaselineKind,
    params: &ArimaParams,
    series: &FlowSeries,
    training: DateRange,
) -> Result<BaselineModel, BaselineError> {
    let days: Vec<NaiveDate> = series.dates().into_iter().filter(|d| training.contains(*d)).collect();
    if days.is_empty() {
        return Err(BaselineError::InsufficientData(format!(
            "no training days for {}/{} in {}..{}",
            series.station_id, series.direction, training.start, training.end
        )));
    }
    let state = match kind {
        BaselineKind::SeasonalNaive => FittedState::SeasonalNaive,
        BaselineKind::HistoricalAverage => FittedState::HistoricalAverage(bin_means(series, &days)),
        BaselineKind::Arima => {
            params.validate()?;
            let per_day: Vec<Vec<f64>> = days
                .iter()
                .map(|d| {
                    (0..BINS_PER_DAY)
                        .map_while(|b| series.get(&TimeBin::new(*d, b).expect("bin in range")))
                        .map(f64::from)
                        .collect()
                })
                .collect();
            FittedState::Arima(fit_ar(&per_day, params.p, params.d)?)
        }
    };
    Ok(BaselineModel {
        kind,
        station_id: series.station_id.clone(),
        direction: series.direction,
        training,
        state,
    })
}

fn bin_means(series: &FlowSeries, days: &[NaiveDate]) -> BinMeans {
    let n = usize::from(BINS_PER_DAY);
    let mut sums = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut counts = [vec![0u32; n], vec![0u32; n], vec![0u32; n]];
    for d in days {
        let slot = match DayType::of(*d) {
            DayType::Weekday => 0,
            DayType::Weekend => 1,
        };
        for b in 0..BINS_PER_DAY {
            if let Some(v) = series.get(&TimeBin::new(*d, b).expect("bin in range")) {
                let i = usize::from(b);
                for s in [slot, 2] {
                    sums[s][i] += f64::from(v);
                    counts[s][i] += 1;
                }
            }
        }
    }
    let finish = |s: usize| -> Vec<Option<f64>> {
        (0..n)
            .map(|i| (counts[s][i] > 0).then(|| sums[s][i] / f64::from(counts[s][i])))
            .collect()
    };
    BinMeans {
        weekday: finish(0),
        weekend: finish(1),
        any: finish(2),
    }
}

impl BaselineModel {
    /// Forecasts `task.horizon` bins; values are clamped at zero.
    pub fn predict(&self, series: &FlowSeries, task: &ForecastTask) -> Result<Vec<f64>, BaselineError> {
        if series.station_id != task.station_id
            || series.direction != task.direction
            || self.station_id != task.station_id
            || self.direction != task.direction
        {
            return Err(BaselineError::SeriesMismatch {
                model_station: self.station_id.clone(),
                model_direction: self.direction,
                task_station: task.station_id.clone(),
                task_direction: task.direction,
            });
        }
        let raw = match &self.state {
            FittedState::SeasonalNaive => seasonal_naive(series, task)?.into_iter().map(f64::from).collect(),
            FittedState::HistoricalAverage(means) => {
                series
                    .window_ending(task.anchor, task.history_len)
                    .ok_or_else(|| underflow(task, task.history_len))?;
                let day_type = DayType::of(task.first_target().service_date);
                task.target_bins()
                    .iter()
                    .map(|b| means.mean(day_type, b.bin_index).unwrap_or(0.0))
                    .collect()
            }
            FittedState::Arima(model) => {
                let needed = task.history_len.max(model.p + model.d);
                let window = series
                    .window_ending(task.anchor, needed)
                    .ok_or_else(|| underflow(task, needed))?;
                let levels: Vec<f64> = window.iter().map(|(_, v)| f64::from(*v)).collect();
                model.forecast_levels(&levels, task.horizon)?
            }
        };
        Ok(raw.into_iter().map(|v| v.max(0.0)).collect())
    }

    /// Coefficients or means as pretty JSON.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bins::DateRange;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2019, 8, d).unwrap()
    }

    fn task_at(series: &FlowSeries, first: TimeBin, d: usize, u: usize) -> ForecastTask {
        ForecastTask::new("t", series.station_id.clone(), series.direction, first.pred(), d, u).unwrap()
    }

    #[test]
    fn constant_series_average() {
        let days = vec![vec![5u32; 108]; 7];
        let s = FlowSeries::from_days("A", FlowDirection::Inflow, date(5), &days);
        let m = fit(BaselineKind::HistoricalAverage, &ArimaParams::default(), &s, DateRange::new(date(5), date(11))).unwrap();
        let FittedState::HistoricalAverage(means) = &m.state else { panic!() };
        assert!(means.any.iter().all(|v| *v == Some(5.0)));
        let t = task_at(&s, TimeBin::new(date(11), 20).unwrap(), 4, 3);
        assert_eq!(m.predict(&s, &t).unwrap(), vec![5.0, 5.0, 5.0]);
    }

    #[test]
    fn seasonal_naive_repeats_the_day() {
        let day: Vec<u32> = (0..108).map(|b| (b * 7 % 31) as u32).collect();
        // Monday 5th to Friday 9th, all identical.
        let s = FlowSeries::from_days("A", FlowDirection::Outflow, date(5), &vec![day.clone(); 5]);
        let first = TimeBin::new(date(9), 0).unwrap();
        for start in (0..108).step_by(6) {
            let first = TimeBin::new(date(9), start).unwrap();
            let t = task_at(&s, first, 12, 6);
            assert_eq!(seasonal_naive(&s, &t).unwrap(), day[start as usize..start as usize + 6].to_vec());
        }
        // Monday's forecast looks back past the weekend to nothing: falls back.
        let t = task_at(&s, TimeBin::new(date(5), 20).unwrap(), 3, 2);
        assert_eq!(seasonal_naive(&s, &t).unwrap(), vec![day[19], day[19]]);
        let early = task_at(&s, first, 2000, 1);
        assert!(matches!(seasonal_naive(&s, &early), Err(BaselineError::HistoryUnderflow { .. })));
    }

    #[test]
    fn weekend_uses_previous_weekend() {
        // Sat 3rd .. Sun 11th; weekend days get 100 + bin, weekdays 1.
        let days: Vec<Vec<u32>> = (3..=11)
            .map(|d| {
                let weekend = DayType::of(date(d)) == DayType::Weekend;
                (0..108).map(|b| if weekend { 100 + b as u32 + d } else { 1 }).collect()
            })
            .collect();
        let s = FlowSeries::from_days("A", FlowDirection::Inflow, date(3), &days);
        let t = task_at(&s, TimeBin::new(date(10), 30).unwrap(), 4, 2);
        // Most recent earlier weekend day is Sunday the 4th.
        assert_eq!(seasonal_naive(&s, &t).unwrap(), vec![134, 135]);
    }

    fn ar1_day(x0: f64, phi: f64, c: f64, n: usize) -> Vec<f64> {
        let mut v = vec![x0];
        while v.len() < n {
            let last = *v.last().unwrap();
            v.push(phi * last + c);
        }
        v
    }

    #[test]
    fn noiseless_ar1_is_recovered() {
        let days = vec![ar1_day(100.0, 0.5, 10.0, 108), ar1_day(3.0, 0.5, 10.0, 108)];
        let m = fit_ar(&days, 1, 0).unwrap();
        assert!((m.coefficients[0] - 0.5).abs() < 1e-6, "{:?}", m.coefficients);
        assert!((m.intercept - 10.0).abs() < 1e-6);
    }

    #[test]
    fn hand_recursion() {
        let m = ArModel {
            p: 1,
            d: 0,
            intercept: 0.0,
            coefficients: vec![0.5],
            sigma: 0.0,
            n_obs: 0,
        };
        assert_eq!(m.forecast_levels(&[8.0], 2).unwrap(), vec![4.0, 2.0]);
        let diffed = ArModel { d: 1, ..m };
        // Differences 2 then 1 and 0.5 added to the last level 10.
        assert_eq!(diffed.forecast_levels(&[8.0, 10.0], 2).unwrap(), vec![11.0, 11.5]);
    }

    #[test]
    fn differencing_restarts_each_day() {
        // Each day is a ramp with slope 2; a level jump between days would
        // corrupt the fit if differences crossed the boundary.
        let days: Vec<Vec<f64>> = (0..3).map(|k| (0..20).map(|t| 1000.0 * f64::from(k) + 2.0 * f64::from(t)).collect()).collect();
        let m = fit_ar(&days, 1, 1).unwrap();
        assert!((m.intercept + m.coefficients[0] * 2.0 - 2.0).abs() < 1e-9);
        assert!(m.sigma < 1e-9);
    }

    #[test]
    fn insufficient_data() {
        assert!(matches!(fit_ar(&[vec![1.0, 2.0]], 2, 1), Err(BaselineError::InsufficientData(_))));
        assert!(matches!(fit_ar(&[vec![1.0; 50]], 0, 0), Err(BaselineError::InvalidParams(_))));
        assert!(matches!(fit_ar(&[vec![1.0; 50]], 1, 2), Err(BaselineError::InvalidParams(_))));
        let s = FlowSeries::from_days("A", FlowDirection::Inflow, date(5), &[vec![1; 108]]);
        assert!(fit(BaselineKind::SeasonalNaive, &ArimaParams::default(), &s, DateRange::new(date(20), date(21))).is_err());
    }

    #[test]
    fn white_noise_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m_true = 40.0;
        let sd = 5.0;
        let days: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..108).map(|_| m_true + sd * (rng.random::<f64>() - 0.5) * 12f64.sqrt()).collect())
            .collect();
        let m = fit_ar(&days, 1, 0).unwrap();
        let se = sd / (m.n_obs as f64).sqrt();
        assert!((m.implied_mean() - m_true).abs() < 3.0 * se, "{} vs {m_true}", m.implied_mean());
    }

    #[test]
    fn outputs_are_clamped() {
        let days: Vec<Vec<u32>> = (0..4).map(|_| (0..108).map(|b| if b < 54 { 200 - 3 * b } else { 0 }).collect()).collect();
        let s = FlowSeries::from_days("A", FlowDirection::Inflow, date(5), &days);
        let m = fit(BaselineKind::Arima, &ArimaParams { p: 1, d: 1 }, &s, DateRange::new(date(5), date(7))).unwrap();
        let t = task_at(&s, TimeBin::new(date(8), 40).unwrap(), 12, 6);
        assert!(m.predict(&s, &t).unwrap().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn mismatched_series_is_rejected() {
        let s = FlowSeries::from_days("A", FlowDirection::Inflow, date(5), &[vec![1; 108], vec![1; 108]]);
        let m = fit(BaselineKind::SeasonalNaive, &ArimaParams::default(), &s, DateRange::new(date(5), date(5))).unwrap();
        let other = FlowSeries::from_days("B", FlowDirection::Inflow, date(5), &[vec![1; 108], vec![1; 108]]);
        let t = task_at(&other, TimeBin::new(date(6), 10).unwrap(), 2, 2);
        assert!(matches!(m.predict(&other, &t), Err(BaselineError::SeriesMismatch { .. })));
    }

    proptest! {
        #[test]
        fn no_leakage(seed in any::<u64>(), start in 0u16..100, kind_idx in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let days: Vec<Vec<u32>> = (0..10).map(|_| (0..108).map(|_| rng.random_range(0..200)).collect()).collect();
            let s = FlowSeries::from_days("A", FlowDirection::Inflow, date(5), &days);
            let training = DateRange::new(date(5), date(11));
            let kind = BaselineKind::ALL[kind_idx];
            let params = ArimaParams { p: 2, d: 1 };
            let m = fit(kind, &params, &s, training).unwrap();
            let u = 6.min(108 - usize::from(start));
            let first = TimeBin::new(date(13), start).unwrap();
            let t = task_at(&s, first, 12, u);
            let before = m.predict(&s, &t).unwrap();

            // Scramble the forecast window and everything after it.
            let mut scrambled = s.clone();
            for (bin, _) in s.iter() {
                if *bin >= first {
                    scrambled.set(*bin, rng.random_range(0..200));
                }
            }
            let refit = fit(kind, &params, &scrambled, training).unwrap();
            prop_assert_eq!(&refit, &m);
            prop_assert_eq!(refit.predict(&scrambled, &t).unwrap(), before);
        }
    }
}
