//! AFC transaction ingest: parsing, service-hour cleaning and ten-minute
//! aggregation into per-station inflow/outflow series.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bins::{DateRange, TimeBin, BINS_PER_DAY};

/// Column names of the AFC transaction file, in canonical order.
pub const AFC_COLUMNS: [&str; 7] = [
    "passenger_id",
    "transaction_datetime",
    "type",
    "device_code",
    "line",
    "station",
    "settlement_date",
];

/// Header of the flow CSV.
pub const FLOW_COLUMNS: [&str; 5] = ["station_id", "direction", "service_date", "bin_index", "count"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unreadable input: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown header layout: expected columns {expected:?}, found {found:?}")]
    Schema { expected: Vec<String>, found: Vec<String> },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("flow file row {row}: {reason}")]
    FlowRow { row: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxKind {
    Entry,
    Exit,
}

impl FromStr for TxKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entry" => Ok(TxKind::Entry),
            "exit" => Ok(TxKind::Exit),
            _ => Err(()),
        }
    }
}

impl fmt::Display for TxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TxKind::Entry => "Entry",
            TxKind::Exit => "Exit",
        })
    }
}

/// One card-swipe transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AfcRecord {
    pub passenger_id: String,
    pub timestamp: NaiveDateTime,
    pub kind: TxKind,
    pub device_code: String,
    pub line_id: String,
    pub station_id: String,
    pub settlement_date: NaiveDate,
}

impl AfcRecord {
    pub fn time_bin(&self) -> Option<TimeBin> {
        TimeBin::from_datetime(self.timestamp)
    }
}

/// Delimiter-separated layout of an AFC file.
#[derive(Debug, Clone, Copy)]
pub struct AfcFormat {
    pub delimiter: u8,
}

impl Default for AfcFormat {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

/// A row that could not be turned into a record. `row` is the 1-based line
/// number in the source file, the header being line 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowDiagnostic {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedAfc {
    pub records: Vec<AfcRecord>,
    pub rejected: Vec<RowDiagnostic>,
}

const DATETIME_FORMATS: [&str; 4] = ["%Y/%m/%d %H:%M", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M:%S", "%Y-%m-%d %H:%M:%S"];

pub fn parse_datetime(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    DATETIME_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
}

fn parse_settlement_date(raw: &str) -> Option<NaiveDate> {
    let raw = raw.trim();
    NaiveDate::parse_from_str(raw, "%Y%m%d")
        .or_else(|_| NaiveDate::parse_from_str(raw, "%Y-%m-%d"))
        .or_else(|_| NaiveDate::parse_from_str(raw, "%Y/%m/%d"))
        .ok()
}

/// Parses an AFC transaction file. Malformed rows are reported in
/// [`ParsedAfc::rejected`] and never dropped silently.
pub fn parse_afc<R: Read>(input: R, format: &AfcFormat) -> Result<ParsedAfc, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);

    let header = reader.headers().map_err(csv_to_ingest)?.clone();
    let found: Vec<String> = header.iter().map(str::to_string).collect();
    let mut columns = [usize::MAX; AFC_COLUMNS.len()];
    let distinct: HashSet<&str> = header.iter().collect();
    if found.len() != AFC_COLUMNS.len() || distinct.len() != found.len() {
        return Err(schema_error(found));
    }
    for (slot, name) in columns.iter_mut().zip(AFC_COLUMNS) {
        match header.iter().position(|h| h == name) {
            Some(idx) => *slot = idx,
            None => return Err(schema_error(found)),
        }
    }

    let mut parsed = ParsedAfc::default();
    let mut row_number = 1;
    for result in reader.records() {
        row_number += 1;
        let row = match result {
            Ok(row) => row,
            Err(err) => {
                if let csv::ErrorKind::Io(_) = err.kind() {
                    return Err(csv_to_ingest(err));
                }
                parsed.rejected.push(RowDiagnostic {
                    row: row_number,
                    reason: format!("unreadable row: {err}"),
                });
                continue;
            }
        };
        match record_from_row(&row, &columns) {
            Ok(record) => parsed.records.push(record),
            Err(reason) => parsed.rejected.push(RowDiagnostic {
                row: row_number,
                reason: reason.to_string(),
            }),
        }
    }
    Ok(parsed)
}

fn schema_error(found: Vec<String>) -> IngestError {
    IngestError::Schema {
        expected: AFC_COLUMNS.iter().map(|s| s.to_string()).collect(),
        found,
    }
}

fn csv_to_ingest(err: csv::Error) -> IngestError {
    if !err.is_io_error() {
        return IngestError::Csv(err);
    }
    match err.into_kind() {
        csv::ErrorKind::Io(io) => IngestError::Io(io),
        _ => unreachable!("is_io_error checked above"),
    }
}

fn record_from_row(row: &csv::StringRecord, columns: &[usize; 7]) -> Result<AfcRecord, &'static str> {
    if row.len() != AFC_COLUMNS.len() {
        return Err("wrong column count");
    }
    let field = |i: usize| row.get(columns[i]).unwrap_or("");
    let timestamp = parse_datetime(field(1)).ok_or("unparseable timestamp")?;
    let kind = field(2).parse::<TxKind>().map_err(|_| "unknown transaction type")?;
    let station_id = field(5);
    if station_id.is_empty() {
        return Err("empty station");
    }
    let settlement_date = parse_settlement_date(field(6)).ok_or("unparseable settlement date")?;
    Ok(AfcRecord {
        passenger_id: field(0).to_string(),
        timestamp,
        kind,
        device_code: field(3).to_string(),
        line_id: field(4).to_string(),
        station_id: station_id.to_string(),
        settlement_date,
    })
}

/// Writes records in the AFC file layout (`YYYY-MM-DD HH:MM` timestamps).
pub fn write_afc<W: Write>(records: &[AfcRecord], out: W) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(AFC_COLUMNS)?;
    for r in records {
        writer.write_record([
            r.passenger_id.as_str(),
            &r.timestamp.format("%Y-%m-%d %H:%M").to_string(),
            &r.kind.to_string(),
            r.device_code.as_str(),
            r.line_id.as_str(),
            r.station_id.as_str(),
            &r.settlement_date.format("%Y%m%d").to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Ordered list of known stations, normally the adjacency matrix station list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StationRegistry {
    stations: Vec<String>,
    lookup: HashSet<String>,
}

impl StationRegistry {
    pub fn new<I, S>(stations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let stations: Vec<String> = stations
            .into_iter()
            .map(Into::into)
            .filter(|s| seen.insert(s.clone()))
            .collect();
        Self {
            lookup: stations.iter().cloned().collect(),
            stations,
        }
    }

    pub fn contains(&self, station: &str) -> bool {
        self.lookup.contains(station)
    }

    pub fn stations(&self) -> &[String] {
        &self.stations
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Cleaned {
    pub records: Vec<AfcRecord>,
    pub dropped_outside_hours: usize,
    pub dropped_unknown_station: usize,
}

/// Keeps records inside [06:00, 24:00) at registered stations, preserving order.
pub fn clean(records: &[AfcRecord], registry: &StationRegistry) -> Cleaned {
    let mut out = Cleaned::default();
    for record in records {
        if record.time_bin().is_none() {
            out.dropped_outside_hours += 1;
        } else if !registry.contains(&record.station_id) {
            out.dropped_unknown_station += 1;
        } else {
            out.records.push(record.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FlowDirection {
    Inflow,
    Outflow,
}

impl FlowDirection {
    pub const ALL: [FlowDirection; 2] = [FlowDirection::Inflow, FlowDirection::Outflow];

    pub fn as_str(&self) -> &'static str {
        match self {
            FlowDirection::Inflow => "Inflow",
            FlowDirection::Outflow => "Outflow",
        }
    }

    pub fn for_kind(kind: TxKind) -> Self {
        match kind {
            TxKind::Entry => FlowDirection::Inflow,
            TxKind::Exit => FlowDirection::Outflow,
        }
    }
}

impl fmt::Display for FlowDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FlowDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inflow" | "in" => Ok(FlowDirection::Inflow),
            "outflow" | "out" => Ok(FlowDirection::Outflow),
            other => Err(format!("unknown flow direction '{other}'")),
        }
    }
}

/// Binned counts for one station and direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowSeries {
    pub station_id: String,
    pub direction: FlowDirection,
    values: BTreeMap<TimeBin, u32>,
}

impl FlowSeries {
    pub fn new(station_id: impl Into<String>, direction: FlowDirection) -> Self {
        Self {
            station_id: station_id.into(),
            direction,
            values: BTreeMap::new(),
        }
    }

    pub fn from_values(
        station_id: impl Into<String>,
        direction: FlowDirection,
        values: BTreeMap<TimeBin, u32>,
    ) -> Self {
        Self {
            station_id: station_id.into(),
            direction,
            values,
        }
    }

    /// Builds a series from whole days of 108 values each, starting at `start`.
    pub fn from_days(
        station_id: impl Into<String>,
        direction: FlowDirection,
        start: NaiveDate,
        days: &[Vec<u32>],
    ) -> Self {
        let mut values = BTreeMap::new();
        for (offset, day) in days.iter().enumerate() {
            let date = start + chrono::Days::new(offset as u64);
            for (b, v) in day.iter().enumerate().take(BINS_PER_DAY as usize) {
                values.insert(TimeBin::new(date, b as u16).expect("bin in range"), *v);
            }
        }
        Self::from_values(station_id, direction, values)
    }

    pub fn get(&self, bin: &TimeBin) -> Option<u32> {
        self.values.get(bin).copied()
    }

    pub fn set(&mut self, bin: TimeBin, count: u32) {
        self.values.insert(bin, count);
    }

    pub fn values(&self) -> &BTreeMap<TimeBin, u32> {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TimeBin, &u32)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.values.values().map(|&v| u64::from(v)).sum()
    }

    pub fn dates(&self) -> BTreeSet<NaiveDate> {
        self.values.keys().map(|b| b.service_date).collect()
    }

    pub fn has_date(&self, date: NaiveDate) -> bool {
        let first = TimeBin::new(date, 0).expect("bin 0");
        self.values
            .range(first..)
            .next()
            .is_some_and(|(b, _)| b.service_date == date)
    }

    /// All 108 values of one day, if every bin of that day is present.
    pub fn day_values(&self, date: NaiveDate) -> Option<Vec<u32>> {
        (0..BINS_PER_DAY)
            .map(|b| self.get(&TimeBin::new(date, b).expect("bin in range")))
            .collect()
    }

    /// The `len` consecutive bins ending at `anchor` (inclusive), oldest first.
    pub fn window_ending(&self, anchor: TimeBin, len: usize) -> Option<Vec<(TimeBin, u32)>> {
        let mut out = Vec::with_capacity(len);
        let mut bin = anchor;
        for i in 0..len {
            out.push((bin, self.get(&bin)?));
            if i + 1 < len {
                bin = bin.pred();
            }
        }
        out.reverse();
        Some(out)
    }

    /// The `len` bins following `anchor`, in order.
    pub fn following(&self, anchor: TimeBin, len: usize) -> Option<Vec<(TimeBin, u32)>> {
        let mut out = Vec::with_capacity(len);
        let mut bin = anchor;
        for _ in 0..len {
            bin = bin.succ();
            out.push((bin, self.get(&bin)?));
        }
        Some(out)
    }
}

/// The set of flow series, keyed by station and direction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlowStore {
    series: BTreeMap<(String, FlowDirection), FlowSeries>,
}

impl FlowStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, series: FlowSeries) {
        self.series
            .insert((series.station_id.clone(), series.direction), series);
    }

    pub fn get(&self, station: &str, direction: FlowDirection) -> Option<&FlowSeries> {
        self.series.get(&(station.to_string(), direction))
    }

    pub fn get_mut(&mut self, station: &str, direction: FlowDirection) -> Option<&mut FlowSeries> {
        self.series.get_mut(&(station.to_string(), direction))
    }

    pub fn iter(&self) -> impl Iterator<Item = &FlowSeries> {
        self.series.values()
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn stations(&self) -> BTreeSet<&str> {
        self.series.keys().map(|(s, _)| s.as_str()).collect()
    }

    pub fn total(&self, direction: FlowDirection) -> u64 {
        self.iter()
            .filter(|s| s.direction == direction)
            .map(FlowSeries::total)
            .sum()
    }

    pub fn dates(&self) -> BTreeSet<NaiveDate> {
        self.iter().flat_map(|s| s.dates()).collect()
    }
}

impl FromIterator<FlowSeries> for FlowStore {
    fn from_iter<T: IntoIterator<Item = FlowSeries>>(iter: T) -> Self {
        let mut store = FlowStore::new();
        for s in iter {
            store.insert(s);
        }
        store
    }
}

/// Counts cleaned records per ten-minute bin. Every registered station gets
/// an Inflow and an Outflow series, zero-filled over the observed date range.
pub fn aggregate_flows(records: &[AfcRecord], registry: &StationRegistry) -> FlowStore {
    let dates = records.iter().filter_map(|r| r.time_bin()).map(|b| b.service_date);
    let (Some(first), Some(last)) = (dates.clone().min(), dates.max()) else {
        return FlowStore::new();
    };
    aggregate_flows_over(records, registry, DateRange::new(first, last))
}

/// Like [`aggregate_flows`] with an explicit date range; records outside the
/// range or outside service hours are ignored.
pub fn aggregate_flows_over(
    records: &[AfcRecord],
    registry: &StationRegistry,
    range: DateRange,
) -> FlowStore {
    let mut store = FlowStore::new();
    for station in registry.stations() {
        for direction in FlowDirection::ALL {
            let mut values = BTreeMap::new();
            for date in range.days() {
                for b in 0..BINS_PER_DAY {
                    values.insert(TimeBin::new(date, b).expect("bin in range"), 0);
                }
            }
            store.insert(FlowSeries::from_values(station.clone(), direction, values));
        }
    }
    for record in records {
        let Some(bin) = record.time_bin() else { continue };
        if !range.contains(bin.service_date) {
            continue;
        }
        let direction = FlowDirection::for_kind(record.kind);
        if let Some(series) = store.get_mut(&record.station_id, direction) {
            if let Some(count) = series.values.get_mut(&bin) {
                *count += 1;
            }
        }
    }
    store
}

/// Median-multiple outlier rule; disabled unless `enabled` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierRule {
    pub enabled: bool,
    pub multiple: f64,
}

impl Default for OutlierRule {
    fn default() -> Self {
        Self {
            enabled: false,
            multiple: 8.0,
        }
    }
}

/// Replaces counts above `multiple ×` the same-bin-index median over the
/// training days with that median. Bins whose median is zero are left alone.
/// Returns the number of replaced bins.
pub fn remove_outliers(store: &mut FlowStore, rule: &OutlierRule, training: DateRange) -> usize {
    if !rule.enabled {
        return 0;
    }
    let mut replaced = 0;
    for series in store.series.values_mut() {
        let mut per_bin: Vec<Vec<u32>> = vec![Vec::new(); BINS_PER_DAY as usize];
        for (bin, &v) in &series.values {
            if training.contains(bin.service_date) {
                per_bin[bin.bin_index as usize].push(v);
            }
        }
        let medians: Vec<Option<f64>> = per_bin.into_iter().map(median).collect();
        for (bin, v) in series.values.iter_mut() {
            if let Some(m) = medians[bin.bin_index as usize] {
                if m > 0.0 && f64::from(*v) > rule.multiple * m {
                    *v = (m + 0.5).floor() as u32;
                    replaced += 1;
                }
            }
        }
    }
    replaced
}

fn median(mut xs: Vec<u32>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_unstable();
    let n = xs.len();
    Some(if n % 2 == 1 {
        f64::from(xs[n / 2])
    } else {
        (f64::from(xs[n / 2 - 1]) + f64::from(xs[n / 2])) / 2.0
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowRow {
    station_id: String,
    direction: String,
    service_date: NaiveDate,
    bin_index: u16,
    count: u32,
}

pub fn write_flow_csv<W: Write>(store: &FlowStore, out: W) -> Result<(), IngestError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record(FLOW_COLUMNS)?;
    for series in store.iter() {
        for (bin, &count) in series.iter() {
            writer.serialize(FlowRow {
                station_id: series.station_id.clone(),
                direction: series.direction.to_string(),
                service_date: bin.service_date,
                bin_index: bin.bin_index,
                count,
            })?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn read_flow_csv<R: Read>(input: R) -> Result<FlowStore, IngestError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != FLOW_COLUMNS {
        return Err(IngestError::Schema {
            expected: FLOW_COLUMNS.iter().map(|s| s.to_string()).collect(),
            found: header,
        });
    }
    let mut store = FlowStore::new();
    for (i, row) in reader.deserialize::<FlowRow>().enumerate() {
        let row_no = i + 2;
        let row = row.map_err(|e| IngestError::FlowRow {
            row: row_no,
            reason: e.to_string(),
        })?;
        let direction: FlowDirection = row
            .direction
            .parse()
            .map_err(|reason| IngestError::FlowRow { row: row_no, reason })?;
        let bin = TimeBin::new(row.service_date, row.bin_index).ok_or_else(|| IngestError::FlowRow {
            row: row_no,
            reason: format!("bin_index {} out of range", row.bin_index),
        })?;
        if store.get(&row.station_id, direction).is_none() {
            store.insert(FlowSeries::new(row.station_id.clone(), direction));
        }
        let series = store.get_mut(&row.station_id, direction).expect("inserted above");
        if series.values.insert(bin, row.count).is_some() {
            return Err(IngestError::FlowRow {
                row: row_no,
                reason: format!("duplicate bin {bin} for {} {direction}", row.station_id),
            });
        }
    }
    Ok(store)
}
