//! Delay-event catalog and binary station adjacency.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EVENT_COLUMNS: [&str; 11] = [
    "event_id",
    "line",
    "delay_type",
    "date",
    "start_time",
    "end_time",
    "interval_from",
    "interval_to",
    "direction",
    "description",
    "scope",
];

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("unreadable input: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown header layout: expected {expected:?}, found {found:?}")]
    Schema { expected: Vec<String>, found: Vec<String> },
    #[error("invalid adjacency matrix: {0}")]
    Adjacency(#[from] AdjacencyError),
    #[error("station '{0}' is not in the adjacency matrix")]
    UnknownStation(String),
    #[error("no path for event interval {from} -> {to} (event {event_id})")]
    NoPath { event_id: String, from: String, to: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdjacencyError {
    #[error("non-binary entry at ({0},{1})")]
    NonBinary(usize, usize),
    #[error("asymmetric entries at ({0},{1})")]
    Asymmetric(usize, usize),
    #[error("nonzero diagonal at ({0},{0})")]
    NonzeroDiagonal(usize),
    #[error("non-square shape: {rows} rows for {columns} columns")]
    NonSquare { rows: usize, columns: usize },
    #[error("row {row} is labelled '{found}' but column {row} is '{expected}'")]
    LabelMismatch { row: usize, expected: String, found: String },
    #[error("duplicate station '{0}'")]
    DuplicateStation(String),
    #[error("empty matrix")]
    Empty,
}

/// Fault family of a delay event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DelayType {
    TrainFault,
    SignalingFault,
    PowerSupplyFault,
    Other,
}

impl DelayType {
    pub const ALL: [DelayType; 4] = [
        DelayType::TrainFault,
        DelayType::SignalingFault,
        DelayType::PowerSupplyFault,
        DelayType::Other,
    ];

    /// Label used in event files.
    pub fn label(&self) -> &'static str {
        match self {
            DelayType::TrainFault => "Train Fault",
            DelayType::SignalingFault => "Signaling Fault",
            DelayType::PowerSupplyFault => "Power Supply Fault",
            DelayType::Other => "Other",
        }
    }

    /// Lower-case phrase for prose.
    pub fn phrase(&self) -> &'static str {
        match self {
            DelayType::TrainFault => "train fault",
            DelayType::SignalingFault => "signaling fault",
            DelayType::PowerSupplyFault => "power supply fault",
            DelayType::Other => "operational fault",
        }
    }
}

impl fmt::Display for DelayType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Maps free-text fault labels to [`DelayType`]. Lookup ignores case,
/// whitespace, hyphens and underscores.
#[derive(Debug, Clone)]
pub struct DelayTypeAliases {
    table: HashMap<String, DelayType>,
}

fn normalize_label(label: &str) -> String {
    label
        .chars()
        .filter(|c| !c.is_whitespace() && *c != '-' && *c != '_')
        .flat_map(char::to_lowercase)
        .collect()
}

impl Default for DelayTypeAliases {
    fn default() -> Self {
        let mut aliases = Self { table: HashMap::new() };
        for (label, kind) in [
            ("Train Fault", DelayType::TrainFault),
            ("Train Failure", DelayType::TrainFault),
            ("Vehicle Fault", DelayType::TrainFault),
            ("列车故障", DelayType::TrainFault),
            ("车辆故障", DelayType::TrainFault),
            ("Signaling Fault", DelayType::SignalingFault),
            ("Signalling Fault", DelayType::SignalingFault),
            ("Signal Fault", DelayType::SignalingFault),
            ("信号故障", DelayType::SignalingFault),
            ("Power Supply Fault", DelayType::PowerSupplyFault),
            ("Power Fault", DelayType::PowerSupplyFault),
            ("Power Failure", DelayType::PowerSupplyFault),
            ("供电故障", DelayType::PowerSupplyFault),
            ("Other", DelayType::Other),
            ("Other Fault", DelayType::Other),
            ("其他", DelayType::Other),
        ] {
            aliases.insert(label, kind);
        }
        aliases
    }
}

impl DelayTypeAliases {
    pub fn insert(&mut self, label: &str, kind: DelayType) {
        self.table.insert(normalize_label(label), kind);
    }

    pub fn resolve(&self, label: &str) -> Option<DelayType> {
        self.table.get(&normalize_label(label)).copied()
    }
}

/// Running direction of the delayed trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrackDirection {
    Up,
    Down,
}

impl FromStr for TrackDirection {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "上行" => return Ok(TrackDirection::Up),
            "下行" => return Ok(TrackDirection::Down),
            _ => {}
        }
        match s.trim().to_ascii_lowercase().as_str() {
            "up" => Ok(TrackDirection::Up),
            "down" => Ok(TrackDirection::Down),
            _ => Err(()),
        }
    }
}

impl fmt::Display for TrackDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrackDirection::Up => "Up",
            TrackDirection::Down => "Down",
        })
    }
}

/// A recorded delay: when, where on the line, and what happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayEvent {
    pub event_id: String,
    pub line_id: String,
    pub delay_type: DelayType,
    pub date: NaiveDate,
    pub start_time: NaiveTime,
    pub end_time: NaiveTime,
    pub interval_from: String,
    pub interval_to: String,
    pub direction: TrackDirection,
    pub description: String,
    pub expected_scope: Option<Vec<String>>,
}

impl DelayEvent {
    pub fn duration_minutes(&self) -> i64 {
        (self.end_time - self.start_time).num_minutes()
    }

    /// Stations named by the event itself: interval endpoints and explicit scope.
    pub fn referenced_stations(&self) -> Vec<&str> {
        let mut out = vec![self.interval_from.as_str(), self.interval_to.as_str()];
        if let Some(scope) = &self.expected_scope {
            out.extend(scope.iter().map(String::as_str));
        }
        out
    }

    /// Whether `[from, to)` on `date` (minutes after midnight) intersects the event window.
    pub fn overlaps(&self, date: NaiveDate, from_minute: u32, to_minute: u32) -> bool {
        let start = minute_of(self.start_time);
        let end = minute_of(self.end_time);
        date == self.date && from_minute < end && start < to_minute
    }
}

pub(crate) fn minute_of(t: NaiveTime) -> u32 {
    use chrono::Timelike;
    t.hour() * 60 + t.minute()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EventDiagnostic {
    pub row: usize,
    pub reason: String,
}

/// Loaded events plus everything that was rejected or needed attention.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventCatalog {
    pub events: Vec<DelayEvent>,
    pub rejected: Vec<EventDiagnostic>,
    /// Rows whose fault label was not in the alias table and became `Other`.
    pub unknown_labels: Vec<EventDiagnostic>,
}

pub fn load_events<R: Read>(input: R) -> Result<EventCatalog, TopologyError> {
    load_events_with(input, &DelayTypeAliases::default())
}

pub fn load_events_with<R: Read>(input: R, aliases: &DelayTypeAliases) -> Result<EventCatalog, TopologyError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.len() == 1 && header[0].is_empty() {
        return Ok(EventCatalog::default());
    }
    if header != EVENT_COLUMNS {
        return Err(TopologyError::Schema {
            expected: EVENT_COLUMNS.iter().map(|s| s.to_string()).collect(),
            found: header,
        });
    }
    let mut catalog = EventCatalog::default();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2;
        let row = row?;
        match event_from_row(&row, aliases) {
            Ok((event, known)) => {
                if !known {
                    catalog.unknown_labels.push(EventDiagnostic {
                        row: row_no,
                        reason: format!("unknown delay type '{}' mapped to Other", &row[2]),
                    });
                }
                catalog.events.push(event);
            }
            Err(reason) => catalog.rejected.push(EventDiagnostic { row: row_no, reason }),
        }
    }
    Ok(catalog)
}

fn parse_clock(raw: &str) -> Option<NaiveTime> {
    NaiveTime::parse_from_str(raw, "%H:%M")
        .or_else(|_| NaiveTime::parse_from_str(raw, "%H:%M:%S"))
        .ok()
}

fn event_from_row(row: &csv::StringRecord, aliases: &DelayTypeAliases) -> Result<(DelayEvent, bool), String> {
    if row.len() != EVENT_COLUMNS.len() {
        return Err("wrong column count".into());
    }
    let event_id = row[0].to_string();
    if event_id.is_empty() {
        return Err("missing event_id".into());
    }
    let (delay_type, known) = match aliases.resolve(&row[2]) {
        Some(t) => (t, true),
        None => (DelayType::Other, false),
    };
    let date = NaiveDate::parse_from_str(&row[3], "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(&row[3], "%Y/%m/%d"))
        .map_err(|_| format!("unparseable date '{}'", &row[3]))?;
    let start_time = parse_clock(&row[4]).ok_or_else(|| format!("unparseable start_time '{}'", &row[4]))?;
    let end_time = parse_clock(&row[5]).ok_or_else(|| format!("unparseable end_time '{}'", &row[5]))?;
    if start_time >= end_time {
        return Err("inverted window".into());
    }
    let (from, to) = (row[6].to_string(), row[7].to_string());
    if from.is_empty() || to.is_empty() {
        return Err("missing interval station".into());
    }
    if from == to {
        return Err("interval endpoints are identical".into());
    }
    let direction = row[8]
        .parse::<TrackDirection>()
        .map_err(|_| format!("unknown direction '{}'", &row[8]))?;
    let description = row[9].to_string();
    if description.is_empty() {
        return Err("missing description".into());
    }
    let scope: Vec<String> = row[10]
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    Ok((
        DelayEvent {
            event_id,
            line_id: row[1].to_string(),
            delay_type,
            date,
            start_time,
            end_time,
            interval_from: from,
            interval_to: to,
            direction,
            description,
            expected_scope: (!scope.is_empty()).then_some(scope),
        },
        known,
    ))
}

pub fn write_events<W: Write>(events: &[DelayEvent], out: W) -> Result<(), TopologyError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(EVENT_COLUMNS)?;
    for e in events {
        let scope = e.expected_scope.as_ref().map(|s| s.join(";")).unwrap_or_default();
        writer.write_record([
            e.event_id.as_str(),
            &e.line_id,
            e.delay_type.label(),
            &e.date.format("%Y-%m-%d").to_string(),
            &e.start_time.format("%H:%M").to_string(),
            &e.end_time.format("%H:%M").to_string(),
            &e.interval_from,
            &e.interval_to,
            &e.direction.to_string(),
            &e.description,
            &scope,
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Symmetric 0/1 station connectivity with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    stations: Vec<String>,
    entries: Vec<u8>,
    index: HashMap<String, usize>,
}

impl AdjacencyMatrix {
    /// Validates and builds a matrix from a row-major `n × n` table.
    pub fn new(stations: Vec<String>, rows: Vec<Vec<u8>>) -> Result<Self, AdjacencyError> {
        let n = stations.len();
        if n == 0 {
            return Err(AdjacencyError::Empty);
        }
        if rows.len() != n {
            return Err(AdjacencyError::NonSquare { rows: rows.len(), columns: n });
        }
        let mut index = HashMap::with_capacity(n);
        for (i, s) in stations.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(AdjacencyError::DuplicateStation(s.clone()));
            }
        }
        for row in &rows {
            if row.len() != n {
                return Err(AdjacencyError::NonSquare { rows: n, columns: row.len() });
            }
        }
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(AdjacencyError::NonBinary(i, j));
                }
            }
        }
        for i in 0..n {
            if rows[i][i] != 0 {
                return Err(AdjacencyError::NonzeroDiagonal(i));
            }
            for j in (i + 1)..n {
                if rows[i][j] != rows[j][i] {
                    return Err(AdjacencyError::Asymmetric(i, j));
                }
            }
        }
        Ok(Self {
            stations,
            entries: rows.into_iter().flatten().collect(),
            index,
        })
    }

    /// A simple line network where consecutive stations are connected.
    pub fn line<S: Into<String>>(stations: impl IntoIterator<Item = S>) -> Result<Self, AdjacencyError> {
        let stations: Vec<String> = stations.into_iter().map(Into::into).collect();
        let n = stations.len();
        let rows = (0..n)
            .map(|i| (0..n).map(|j| u8::from(i.abs_diff(j) == 1)).collect())
            .collect();
        Self::new(stations, rows)
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

    pub fn index_of(&self, station: &str) -> Option<usize> {
        self.index.get(station).copied()
    }

    pub fn contains(&self, station: &str) -> bool {
        self.index.contains_key(station)
    }

    pub fn entry(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.len() + j]
    }

    fn neighbor_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.entry(i, j) == 1)
    }

    /// Direct neighbors in matrix order.
    pub fn neighbors(&self, station: &str) -> Result<Vec<&str>, TopologyError> {
        let i = self
            .index_of(station)
            .ok_or_else(|| TopologyError::UnknownStation(station.to_string()))?;
        Ok(self.neighbor_indices(i).map(|j| self.stations[j].as_str()).collect())
    }

    /// Breadth-first shortest path, preferring lower matrix indices on ties.
    pub fn shortest_path(&self, from: &str, to: &str) -> Result<Option<Vec<&str>>, TopologyError> {
        let src = self
            .index_of(from)
            .ok_or_else(|| TopologyError::UnknownStation(from.to_string()))?;
        let dst = self
            .index_of(to)
            .ok_or_else(|| TopologyError::UnknownStation(to.to_string()))?;
        let mut parent = vec![usize::MAX; self.len()];
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([src]);
        seen[src] = true;
        while let Some(v) = queue.pop_front() {
            if v == dst {
                let mut path = vec![dst];
                let mut cur = dst;
                while cur != src {
                    cur = parent[cur];
                    path.push(cur);
                }
                path.reverse();
                return Ok(Some(path.into_iter().map(|i| self.stations[i].as_str()).collect()));
            }
            for w in self.neighbor_indices(v) {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = v;
                    queue.push_back(w);
                }
            }
        }
        Ok(None)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TopologyError> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["station".to_string()];
        header.extend(self.stations.iter().cloned());
        writer.write_record(&header)?;
        for (i, s) in self.stations.iter().enumerate() {
            let mut row = vec![s.clone()];
            row.extend((0..self.len()).map(|j| self.entry(i, j).to_string()));
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Loads an adjacency CSV whose first row and first column carry station ids.
pub fn load_adjacency<R: Read>(input: R) -> Result<AdjacencyMatrix, TopologyError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .has_headers(false)
        .from_reader(input);
    let mut rows = reader.records();
    let header = rows.next().ok_or(AdjacencyError::Empty)??;
    let stations: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut body = Vec::new();
    for (i, row) in rows.enumerate() {
        let row = row?;
        let label = row.get(0).unwrap_or("").to_string();
        if let Some(expected) = stations.get(i) {
            if *expected != label {
                return Err(AdjacencyError::LabelMismatch {
                    row: i,
                    expected: expected.clone(),
                    found: label,
                }
                .into());
            }
        }
        let cells = row
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, cell)| match cell {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                _ => Err(AdjacencyError::NonBinary(i, j)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        body.push(cells);
    }
    Ok(AdjacencyMatrix::new(stations, body)?)
}

/// Stations touched by an event: the shortest path across the event interval
/// widened by `hops` breadth-first steps. An explicit `expected_scope` on the
/// event is returned as-is (deduplicated).
pub fn affected_stations(
    event: &DelayEvent,
    adj: &AdjacencyMatrix,
    hops: usize,
) -> Result<Vec<String>, TopologyError> {
    if let Some(scope) = &event.expected_scope {
        let mut seen = BTreeSet::new();
        return Ok(scope.iter().filter(|s| seen.insert(s.as_str())).cloned().collect());
    }
    let path = adj
        .shortest_path(&event.interval_from, &event.interval_to)?
        .ok_or_else(|| TopologyError::NoPath {
            event_id: event.event_id.clone(),
            from: event.interval_from.clone(),
            to: event.interval_to.clone(),
        })?;
    let mut seen = vec![false; adj.len()];
    let mut order: Vec<usize> = Vec::new();
    let mut frontier: Vec<usize> = Vec::new();
    for s in path {
        let i = adj.index_of(s).expect("path stations exist");
        seen[i] = true;
        order.push(i);
        frontier.push(i);
    }
    for _ in 0..hops {
        let mut next = BTreeSet::new();
        for &v in &frontier {
            for w in adj.neighbor_indices(v) {
                if !seen[w] {
                    next.insert(w);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        for &w in &next {
            seen[w] = true;
            order.push(w);
        }
        frontier = next.into_iter().collect();
    }
    Ok(order.into_iter().map(|i| adj.stations()[i].clone()).collect())
}
