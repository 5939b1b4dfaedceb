use std::fmt;

use super::PromptError;
use crate::ingest::{FlowDirection, FlowSeries, FlowStore};
use crate::topology::{affected_stations, AdjacencyMatrix, DelayEvent, TopologyError};

pub const DEFAULT_SCOPE_HOPS: usize = 1;

/// A non-fatal mismatch found while cross-checking the inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RepositoryDiagnostic {
    /// Flows exist for a station the network does not know.
    FlowWithoutStation(String),
    /// A network station has no flow series in this direction.
    StationWithoutFlow(String, FlowDirection),
}

impl fmt::Display for RepositoryDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RepositoryDiagnostic::FlowWithoutStation(s) => {
                write!(f, "flows recorded for '{s}', which is not in the adjacency matrix")
            }
            RepositoryDiagnostic::StationWithoutFlow(s, d) => write!(f, "no {d} series for station '{s}'"),
        }
    }
}

/// Flows, events and topology, cross-checked and ready for rendering.
/// Immutable once built.
#[derive(Debug, Clone)]
pub struct InformationRepository {
    flows: FlowStore,
    events: Vec<DelayEvent>,
    adjacency: AdjacencyMatrix,
    scope_hops: usize,
    event_scopes: Vec<Vec<String>>,
}

pub fn build_repository(
    flows: FlowStore,
    events: Vec<DelayEvent>,
    adjacency: AdjacencyMatrix,
) -> Result<(InformationRepository, Vec<RepositoryDiagnostic>), PromptError> {
    InformationRepository::build(flows, events, adjacency, DEFAULT_SCOPE_HOPS)
}

impl InformationRepository {
    /// Builds with an explicit scope widening for events without an
    /// explicit scope.
    pub fn build(
        flows: FlowStore,
        events: Vec<DelayEvent>,
        adjacency: AdjacencyMatrix,
        scope_hops: usize,
    ) -> Result<(Self, Vec<RepositoryDiagnostic>), PromptError> {
        for event in &events {
            if let Some(bad) = event.referenced_stations().into_iter().find(|s| !adjacency.contains(s)) {
                return Err(PromptError::CrossReference {
                    event_id: event.event_id.clone(),
                    station: bad.to_string(),
                });
            }
        }
        let event_scopes = events
            .iter()
            .map(|e| {
                affected_stations(e, &adjacency, scope_hops).map_err(|err| PromptError::EventScope {
                    event_id: e.event_id.clone(),
                    reason: match err {
                        TopologyError::NoPath { .. } => "no path between interval stations".to_string(),
                        other => other.to_string(),
                    },
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut diagnostics = Vec::new();
        for station in flows.stations() {
            if !adjacency.contains(station) {
                diagnostics.push(RepositoryDiagnostic::FlowWithoutStation(station.to_string()));
            }
        }
        if !flows.is_empty() {
            for station in adjacency.stations() {
                for direction in FlowDirection::ALL {
                    if flows.get(station, direction).is_none() {
                        diagnostics.push(RepositoryDiagnostic::StationWithoutFlow(station.clone(), direction));
                    }
                }
            }
        }
        Ok((
            Self {
                flows,
                events,
                adjacency,
                scope_hops,
                event_scopes,
            },
            diagnostics,
        ))
    }

    pub fn flows(&self) -> &FlowStore {
        &self.flows
    }

    pub fn series(&self, station: &str, direction: FlowDirection) -> Result<&FlowSeries, PromptError> {
        if !self.adjacency.contains(station) {
            return Err(PromptError::UnknownStation(station.to_string()));
        }
        self.flows.get(station, direction).ok_or_else(|| PromptError::MissingSeries {
            station: station.to_string(),
            direction: direction.to_string(),
        })
    }

    pub fn events(&self) -> &[DelayEvent] {
        &self.events
    }

    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.adjacency
    }

    /// Stations in adjacency-matrix order.
    pub fn station_registry(&self) -> &[String] {
        self.adjacency.stations()
    }

    pub fn scope_hops(&self) -> usize {
        self.scope_hops
    }

    /// Affected stations of the `i`-th event.
    pub fn event_scope(&self, i: usize) -> &[String] {
        &self.event_scopes[i]
    }

    /// Events paired with their affected stations.
    pub fn events_with_scope(&self) -> impl Iterator<Item = (&DelayEvent, &[String])> {
        self.events.iter().zip(self.event_scopes.iter().map(Vec::as_slice))
    }

    /// Events on `date` whose window intersects `[from, to)` minutes and whose
    /// scope includes `station`.
    pub fn events_touching(
        &self,
        station: &str,
        date: chrono::NaiveDate,
        from_minute: u32,
        to_minute: u32,
    ) -> Vec<(&DelayEvent, &[String])> {
        self.events_with_scope()
            .filter(|(e, scope)| e.overlaps(date, from_minute, to_minute) && scope.iter().any(|s| s == station))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use crate::topology::{DelayType, TrackDirection};
    use chrono::{NaiveDate, NaiveTime};

    fn event(from: &str, to: &str) -> DelayEvent {
        DelayEvent {
            event_id: "E1".into(),
            line_id: "Line 1".into(),
            delay_type: DelayType::SignalingFault,
            date: NaiveDate::from_ymd_opt(2019, 9, 19).unwrap(),
            start_time: NaiveTime::from_hms_opt(18, 4, 0).unwrap(),
            end_time: NaiveTime::from_hms_opt(19, 8, 0).unwrap(),
            interval_from: from.into(),
            interval_to: to.into(),
            direction: TrackDirection::Down,
            description: "signal failure".into(),
            expected_scope: None,
        }
    }

    #[test]
    fn trivial_repository() {
        let adj = AdjacencyMatrix::line(["A"]).unwrap();
        let (repo, diags) = build_repository(FlowStore::new(), vec![], adj).unwrap();
        assert!(diags.is_empty());
        assert_eq!(repo.station_registry(), &["A".to_string()]);
    }

    #[test]
    fn unknown_event_station_is_fatal() {
        let adj = AdjacencyMatrix::line(["A", "B"]).unwrap();
        let err = build_repository(FlowStore::new(), vec![event("A", "Z")], adj).unwrap_err();
        assert_eq!(
            err,
            PromptError::CrossReference {
                event_id: "E1".into(),
                station: "Z".into()
            }
        );
        assert!(err.to_string().contains("'Z'"));
    }

    #[test]
    fn five_station_fixture_has_ten_series() {
        let mut cfg = SynthConfig {
            n_stations: 5,
            n_days: 3,
            ..SynthConfig::default()
        };
        cfg.delays.clear();
        let ds = generate(&cfg).unwrap();
        let events = vec![event("S01", "S03"), event("S04", "S05")];
        let (repo, diags) = build_repository(ds.flow_store(), events, ds.adjacency.clone()).unwrap();
        assert!(diags.is_empty());
        assert_eq!(repo.flows().len(), 10);
        assert_eq!(repo.event_scope(0), &["S01", "S02", "S03", "S04"]);
    }

    #[test]
    fn mismatches_are_reported() {
        let adj = AdjacencyMatrix::line(["A", "B"]).unwrap();
        let mut flows = FlowStore::new();
        flows.insert(FlowSeries::new("A", FlowDirection::Inflow));
        flows.insert(FlowSeries::new("Q", FlowDirection::Inflow));
        let (_, diags) = build_repository(flows, vec![], adj).unwrap();
        assert!(diags.contains(&RepositoryDiagnostic::FlowWithoutStation("Q".into())));
        assert!(diags.contains(&RepositoryDiagnostic::StationWithoutFlow("B".into(), FlowDirection::Inflow)));
        assert!(diags.contains(&RepositoryDiagnostic::StationWithoutFlow("A".into(), FlowDirection::Outflow)));
    }
}
