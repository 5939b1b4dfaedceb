//! Seeded synthetic AFC, delay-event and adjacency data.
//!
//! Stations sit on a single line. Each station and direction draws Poisson
//! counts around a bimodal daily profile. A delay suppresses outflow at the
//! affected stations for the duration of the window and re-emits a share of
//! the withheld volume right after it, which gives the drop-then-peak shape
//! seen at terminal stations during disruptions.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Days, NaiveDate, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bins::{DateRange, DayType, TimeBin, BINS_PER_DAY, BIN_MINUTES, SERVICE_START_HOUR};
use crate::ingest::{FlowDirection, FlowSeries, FlowStore, AFC_COLUMNS};
use crate::topology::{
    affected_stations, minute_of, write_events, AdjacencyMatrix, DelayEvent, DelayType, TopologyError,
    TrackDirection,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("write failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One injected disruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySpec {
    /// Zero-based day offset from `start_date`.
    pub day: usize,
    pub start: NaiveTime,
    pub end: NaiveTime,
    pub interval_from: String,
    pub interval_to: String,
    pub delay_type: DelayType,
    #[serde(default = "default_direction")]
    pub direction: TrackDirection,
    /// Share of outflow withheld at affected stations during the window.
    pub drop_fraction: f64,
    /// Share of the withheld volume re-emitted after the window.
    pub surge_fraction: f64,
    /// Number of bins the surge is spread over.
    pub surge_duration: usize,
}

fn default_direction() -> TrackDirection {
    TrackDirection::Down
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_stations: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub line_id: String,
    /// Mean count per bin on a weekday, 108 entries.
    pub base_profile: Vec<f64>,
    pub weekend_scale: f64,
    /// Poisson sampling around the means; when off, counts are the rounded means.
    pub noise: bool,
    /// Breadth-first widening of the delay interval when choosing affected stations.
    pub scope_hops: usize,
    pub delays: Vec<DelaySpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let clock = |h, m| NaiveTime::from_hms_opt(h, m, 0).expect("valid time");
        Self {
            seed: 42,
            n_stations: 12,
            n_days: 21,
            start_date: NaiveDate::from_ymd_opt(2019, 8, 5).expect("valid date"),
            line_id: "Line 1".to_string(),
            base_profile: default_profile(),
            weekend_scale: 0.7,
            noise: true,
            scope_hops: 1,
            delays: vec![
                DelaySpec {
                    day: 9,
                    start: clock(17, 20),
                    end: clock(18, 0),
                    interval_from: station_name(2),
                    interval_to: station_name(4),
                    delay_type: DelayType::PowerSupplyFault,
                    direction: TrackDirection::Up,
                    drop_fraction: 0.4,
                    surge_fraction: 1.0,
                    surge_duration: 4,
                },
                DelaySpec {
                    day: 15,
                    start: clock(7, 40),
                    end: clock(8, 40),
                    interval_from: station_name(8),
                    interval_to: station_name(11),
                    delay_type: DelayType::SignalingFault,
                    direction: TrackDirection::Down,
                    drop_fraction: 0.5,
                    surge_fraction: 1.0,
                    surge_duration: 6,
                },
                DelaySpec {
                    day: 18,
                    start: clock(18, 10),
                    end: clock(18, 50),
                    interval_from: station_name(3),
                    interval_to: station_name(5),
                    delay_type: DelayType::TrainFault,
                    direction: TrackDirection::Up,
                    drop_fraction: 0.5,
                    surge_fraction: 0.8,
                    surge_duration: 4,
                },
            ],
        }
    }
}

/// Station id for zero-based position `i` on the synthetic line.
pub fn station_name(i: usize) -> String {
    format!("S{:02}", i + 1)
}

/// Weekday mean profile with morning (bins 12–18) and evening (bins 66–72) peaks.
pub fn default_profile() -> Vec<f64> {
    (0..BINS_PER_DAY)
        .map(|b| {
            let b = f64::from(b);
            let morning = 22.0 * (-((b - 15.0) / 4.0).powi(2)).exp();
            let evening = 18.0 * (-((b - 69.0) / 5.0).powi(2)).exp();
            let midday = 2.0 * (-((b - 42.0) / 18.0).powi(2)).exp();
            let tail = if b > 96.0 { 0.5 } else { 1.5 };
            tail + midday + morning + evening
        })
        .collect()
}

/// Generated dataset: exact per-bin counts plus the means they were drawn from.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub adjacency: AdjacencyMatrix,
    pub events: Vec<DelayEvent>,
    /// Affected stations per event, in event order.
    pub affected: Vec<Vec<String>>,
    counts: BTreeMap<(String, FlowDirection), Vec<u32>>,
    means: BTreeMap<(String, FlowDirection), Vec<f64>>,
}

impl SynthDataset {
    pub fn date_range(&self) -> DateRange {
        let start = self.config.start_date;
        DateRange::new(start, start + Days::new(self.config.n_days as u64 - 1))
    }

    /// Exact generated counts as flow series.
    pub fn flow_store(&self) -> FlowStore {
        self.counts
            .iter()
            .map(|((station, dir), counts)| {
                let days: Vec<Vec<u32>> = counts.chunks(BINS_PER_DAY as usize).map(<[u32]>::to_vec).collect();
                FlowSeries::from_days(station.clone(), *dir, self.config.start_date, &days)
            })
            .collect()
    }

    /// Analytic means, `n_days × 108` values in day-major order.
    pub fn means(&self, station: &str, direction: FlowDirection) -> Option<&[f64]> {
        self.means.get(&(station.to_string(), direction)).map(Vec::as_slice)
    }

    pub fn counts(&self, station: &str, direction: FlowDirection) -> Option<&[u32]> {
        self.counts.get(&(station.to_string(), direction)).map(Vec::as_slice)
    }

    /// Total generated records (entries plus exits).
    pub fn record_count(&self) -> u64 {
        self.counts.values().flatten().map(|&c| u64::from(c)).sum()
    }

    /// Writes one AFC transaction per counted passenger. Minutes within a bin
    /// come from a separate seeded stream so the output is byte-stable.
    pub fn write_afc<W: Write>(&self, out: W) -> Result<(), SynthError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x00af_c0de);
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(AFC_COLUMNS)?;
        let mut passenger: u64 = 880_000_000;
        let stations = self.adjacency.stations();
        for day in 0..self.config.n_days {
            let date = self.config.start_date + Days::new(day as u64);
            let settlement = date.format("%Y%m%d").to_string();
            for b in 0..BINS_PER_DAY {
                let bin = TimeBin::new(date, b).expect("bin in range");
                let start = bin.start_minute();
                for (si, station) in stations.iter().enumerate() {
                    for direction in FlowDirection::ALL {
                        let count = self.counts[&(station.clone(), direction)][day * BINS_PER_DAY as usize + b as usize];
                        let (kind, gate) = match direction {
                            FlowDirection::Inflow => ("Entry", 1),
                            FlowDirection::Outflow => ("Exit", 2),
                        };
                        for _ in 0..count {
                            let minute = start + rng.random_range(0..BIN_MINUTES);
                            passenger += 1;
                            writer.write_record([
                                passenger.to_string().as_str(),
                                &format!("{date} {:02}:{:02}", minute / 60, minute % 60),
                                kind,
                                &format!("26{:02}{gate}{:04}", si + 1, rng.random_range(0..40u32)),
                                &self.config.line_id,
                                station,
                                &settlement,
                            ])?;
                        }
                    }
                }
            }
        }
        writer.flush()?;
        Ok(())
    }

    pub fn write_events<W: Write>(&self, out: W) -> Result<(), SynthError> {
        Ok(write_events(&self.events, out)?)
    }

    pub fn write_adjacency<W: Write>(&self, out: W) -> Result<(), SynthError> {
        Ok(self.adjacency.write_csv(out)?)
    }
}

fn window_bins(start: NaiveTime, end: NaiveTime) -> std::ops::Range<usize> {
    let base = SERVICE_START_HOUR * 60;
    let first = (minute_of(start) - base) / BIN_MINUTES;
    let last_exclusive = (minute_of(end) - base).div_ceil(BIN_MINUTES);
    first as usize..last_exclusive as usize
}

fn validate(config: &SynthConfig) -> Result<(), SynthError> {
    let fail = |msg: String| Err(SynthError::Config(msg));
    if config.n_stations < 2 {
        return fail(format!("n_stations must be at least 2, got {}", config.n_stations));
    }
    if config.n_days == 0 {
        return fail("n_days must be positive".into());
    }
    if config.base_profile.len() != BINS_PER_DAY as usize {
        return fail(format!("base_profile needs {BINS_PER_DAY} entries, got {}", config.base_profile.len()));
    }
    if config.base_profile.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return fail("base_profile entries must be finite and non-negative".into());
    }
    if !(config.weekend_scale > 0.0 && config.weekend_scale <= 1.0) {
        return fail(format!("weekend_scale must be in (0,1], got {}", config.weekend_scale));
    }
    let service_start = NaiveTime::from_hms_opt(SERVICE_START_HOUR, 0, 0).expect("valid");
    for (k, d) in config.delays.iter().enumerate() {
        if d.day >= config.n_days {
            return fail(format!("delay {k}: day {} is beyond n_days {}", d.day, config.n_days));
        }
        if d.start < service_start || d.start >= d.end {
            return fail(format!("delay {k}: window {}-{} is outside service hours", d.start, d.end));
        }
        for (name, v) in [("drop_fraction", d.drop_fraction), ("surge_fraction", d.surge_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("delay {k}: {name} {v} not in [0,1]"));
            }
        }
        let window = window_bins(d.start, d.end);
        if window.end + d.surge_duration > BINS_PER_DAY as usize {
            return fail(format!("delay {k}: surge extends beyond service hours"));
        }
    }
    Ok(())
}

fn describe(spec: &DelaySpec, line: &str, affected: &[String]) -> String {
    let minutes = (spec.end - spec.start).num_minutes();
    let mut text = format!(
        "At {} a {} occurred on {line} between {} and {} in the {} direction. ",
        spec.start.format("%H:%M"),
        spec.delay_type.phrase(),
        spec.interval_from,
        spec.interval_to,
        spec.direction.to_string().to_lowercase(),
    );
    text.push_str(&format!(
        "Trains were held or ran at reduced speed for {minutes} minutes until service recovered at {}. ",
        spec.end.format("%H:%M")
    ));
    for station in affected {
        text.push_str(&format!(
            "Arrivals at {station} were irregular and platform dwell times increased during the disruption. "
        ));
    }
    text.push_str("Passengers were advised to expect delays and crowding after recovery.");
    text
}

/// Generates a dataset; identical configs give identical datasets.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset, SynthError> {
    validate(config)?;
    let names: Vec<String> = (0..config.n_stations).map(station_name).collect();
    let adjacency = AdjacencyMatrix::line(names.clone()).map_err(TopologyError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let weights: BTreeMap<(String, FlowDirection), f64> = names
        .iter()
        .flat_map(|s| FlowDirection::ALL.map(|d| (s.clone(), d)))
        .map(|key| {
            let w = rng.random_range(0.6..1.4);
            (key, w)
        })
        .collect();

    let per_day = BINS_PER_DAY as usize;
    let mut means: BTreeMap<(String, FlowDirection), Vec<f64>> = BTreeMap::new();
    for (key, w) in &weights {
        let mut m = Vec::with_capacity(config.n_days * per_day);
        for day in 0..config.n_days {
            let date = config.start_date + Days::new(day as u64);
            let scale = match DayType::of(date) {
                DayType::Weekday => 1.0,
                DayType::Weekend => config.weekend_scale,
            };
            m.extend(config.base_profile.iter().map(|p| p * w * scale));
        }
        means.insert(key.clone(), m);
    }

    let mut events = Vec::with_capacity(config.delays.len());
    let mut affected_all = Vec::with_capacity(config.delays.len());
    for (k, spec) in config.delays.iter().enumerate() {
        for s in [&spec.interval_from, &spec.interval_to] {
            if !adjacency.contains(s) {
                return Err(SynthError::Config(format!("delay {k}: unknown station '{s}'")));
            }
        }
        let mut event = DelayEvent {
            event_id: format!("D{:02}", k + 1),
            line_id: config.line_id.clone(),
            delay_type: spec.delay_type,
            date: config.start_date + Days::new(spec.day as u64),
            start_time: spec.start,
            end_time: spec.end,
            interval_from: spec.interval_from.clone(),
            interval_to: spec.interval_to.clone(),
            direction: spec.direction,
            description: String::new(),
            expected_scope: None,
        };
        let affected = affected_stations(&event, &adjacency, config.scope_hops)?;
        event.description = describe(spec, &config.line_id, &affected);

        let window = window_bins(spec.start, spec.end);
        for station in &affected {
            let series = means
                .get_mut(&(station.clone(), FlowDirection::Outflow))
                .expect("every station has an outflow mean");
            let day = &mut series[spec.day * per_day..(spec.day + 1) * per_day];
            let mut withheld = 0.0;
            for b in window.clone() {
                let cut = day[b] * spec.drop_fraction;
                day[b] -= cut;
                withheld += cut;
            }
            if spec.surge_duration > 0 {
                let extra = withheld * spec.surge_fraction / spec.surge_duration as f64;
                for b in window.end..window.end + spec.surge_duration {
                    day[b] += extra;
                }
            }
        }
        events.push(event);
        affected_all.push(affected);
    }

    let mut counts = BTreeMap::new();
    for (key, m) in &means {
        let c: Vec<u32> = m
            .iter()
            .map(|&mean| {
                if !config.noise {
                    round_half_up(mean)
                } else if mean > 0.0 {
                    Poisson::new(mean).expect("positive mean").sample(&mut rng) as u32
                } else {
                    0
                }
            })
            .collect();
        counts.insert(key.clone(), c);
    }

    Ok(SynthDataset {
        config: config.clone(),
        adjacency,
        events,
        affected: affected_all,
        counts,
        means,
    })
}

pub(crate) fn round_half_up(x: f64) -> u32 {
    (x + 0.5).floor().max(0.0) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{aggregate_flows, clean, parse_afc, AfcFormat, StationRegistry};
    use crate::topology::{load_adjacency, load_events};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            n_stations: 4,
            n_days: 3,
            delays: vec![],
            ..SynthConfig::default()
        }
    }

    fn afc_bytes(ds: &SynthDataset) -> Vec<u8> {
        let mut buf = Vec::new();
        ds.write_afc(&mut buf).unwrap();
        buf
    }

    #[test]
    fn profile_peaks_where_expected() {
        let p = default_profile();
        let morning = (0..30).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        let evening = (50..100).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert!((12..=18).contains(&morning));
        assert!((66..=72).contains(&evening));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small(9)).unwrap();
        let b = generate(&small(9)).unwrap();
        assert_eq!(afc_bytes(&a), afc_bytes(&b));
        let mut ea = Vec::new();
        let mut eb = Vec::new();
        a.write_events(&mut ea).unwrap();
        b.write_events(&mut eb).unwrap();
        assert_eq!(ea, eb);
        assert_ne!(afc_bytes(&a), afc_bytes(&generate(&small(10)).unwrap()));
    }

    #[test]
    fn noiseless_counts_equal_rounded_means() {
        let mut cfg = small(1);
        cfg.noise = false;
        let ds = generate(&cfg).unwrap();
        for station in ds.adjacency.stations() {
            for dir in FlowDirection::ALL {
                let means = ds.means(station, dir).unwrap();
                let counts = ds.counts(station, dir).unwrap();
                let expected: Vec<u32> = means.iter().map(|&m| round_half_up(m)).collect();
                assert_eq!(counts, expected.as_slice());
            }
        }
    }

    #[test]
    fn null_delay_leaves_means_untouched() {
        let mut base = small(3);
        base.noise = false;
        let mut delayed = base.clone();
        delayed.delays.push(DelaySpec {
            day: 1,
            start: NaiveTime::from_hms_opt(8, 0, 0).unwrap(),
            end: NaiveTime::from_hms_opt(9, 0, 0).unwrap(),
            interval_from: station_name(0),
            interval_to: station_name(2),
            delay_type: DelayType::TrainFault,
            direction: TrackDirection::Up,
            drop_fraction: 0.0,
            surge_fraction: 0.0,
            surge_duration: 0,
        });
        let a = generate(&base).unwrap();
        let b = generate(&delayed).unwrap();
        for s in a.adjacency.stations() {
            assert_eq!(a.means(s, FlowDirection::Outflow), b.means(s, FlowDirection::Outflow));
        }
    }

    #[test]
    fn generated_files_parse_cleanly() {
        let mut cfg = SynthConfig { n_days: 2, ..SynthConfig::default() };
        cfg.delays.retain(|d| d.day < 2);
        let ds = generate(&cfg).unwrap();
        let parsed = parse_afc(afc_bytes(&ds).as_slice(), &AfcFormat::default()).unwrap();
        assert!(parsed.rejected.is_empty());
        let mut ev = Vec::new();
        ds.write_events(&mut ev).unwrap();
        let catalog = load_events(ev.as_slice()).unwrap();
        assert!(catalog.rejected.is_empty() && catalog.unknown_labels.is_empty());
        assert_eq!(catalog.events, ds.events);
        let mut adj = Vec::new();
        ds.write_adjacency(&mut adj).unwrap();
        let adjacency = load_adjacency(adj.as_slice()).unwrap();
        let registry = StationRegistry::new(adjacency.stations().iter().cloned());
        let cleaned = clean(&parsed.records, &registry);
        assert_eq!(cleaned.records.len(), parsed.records.len());
        assert_eq!(aggregate_flows(&cleaned.records, &registry), ds.flow_store());
    }

    #[test]
    fn window_outside_service_hours_is_rejected() {
        let mut cfg = small(1);
        cfg.delays.push(DelaySpec {
            day: 0,
            start: NaiveTime::from_hms_opt(5, 0, 0).unwrap(),
            end: NaiveTime::from_hms_opt(6, 30, 0).unwrap(),
            interval_from: station_name(0),
            interval_to: station_name(1),
            delay_type: DelayType::Other,
            direction: TrackDirection::Up,
            drop_fraction: 0.5,
            surge_fraction: 1.0,
            surge_duration: 2,
        });
        assert!(matches!(generate(&cfg), Err(SynthError::Config(_))));
    }

    #[test]
    fn withheld_demand_reappears_after_the_window() {
        let mut cfg = small(5);
        cfg.noise = false;
        cfg.delays.push(DelaySpec {
            day: 1,
            start: NaiveTime::from_hms_opt(8, 0, 0).unwrap(),
            end: NaiveTime::from_hms_opt(9, 0, 0).unwrap(),
            interval_from: station_name(1),
            interval_to: station_name(2),
            delay_type: DelayType::SignalingFault,
            direction: TrackDirection::Down,
            drop_fraction: 0.5,
            surge_fraction: 1.0,
            surge_duration: 6,
        });
        let ds = generate(&cfg).unwrap();
        let mut plain_cfg = small(5);
        plain_cfg.noise = false;
        let base = generate(&plain_cfg).unwrap();
        for s in &ds.affected[0] {
            let delayed = ds.means(s, FlowDirection::Outflow).unwrap();
            let plain = base.means(s, FlowDirection::Outflow).unwrap();
            let day = 108..216;
            let total_delayed: f64 = delayed[day.clone()].iter().sum();
            let total_plain: f64 = plain[day.clone()].iter().sum();
            assert!((total_delayed - total_plain).abs() < 1e-9);
            // bins 12..18 drop, bins 18..24 surge
            assert!((delayed[108 + 12] - plain[108 + 12] * 0.5).abs() < 1e-12);
            assert!(delayed[108 + 18] > plain[108 + 18]);
        }
    }
}
