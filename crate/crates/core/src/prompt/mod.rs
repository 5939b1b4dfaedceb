//! Information repository, template library and prompt rendering.
//!
//! Templates are plain data (serialisable to JSON). Rendering a template for
//! a task yields prose sections plus a delimited, machine-readable data block
//! holding every number the prose mentions.

mod data_block;
mod render;
mod repository;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ForecastTask;

pub use data_block::{ComparableDay, DataBlock, Observation, DATA_BLOCK_END, DATA_BLOCK_START};
pub use render::{fill_placeholders, render, RenderedPrompt, OUTPUT_CONTRACT};
pub use repository::{build_repository, InformationRepository, RepositoryDiagnostic, DEFAULT_SCOPE_HOPS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("empty template axis: {0}")]
    EmptyAxis(&'static str),
    #[error("unknown station '{0}'")]
    UnknownStation(String),
    #[error("event {event_id} references station '{station}' which is not in the adjacency matrix")]
    CrossReference { event_id: String, station: String },
    #[error("event {event_id}: {reason}")]
    EventScope { event_id: String, reason: String },
    #[error("history underflow: task {task_id} needs {needed} bins ending at {anchor}")]
    HistoryUnderflow { task_id: String, needed: usize, anchor: String },
    #[error("no {direction} series for station '{station}'")]
    MissingSeries { station: String, direction: String },
    #[error("template {template_id} lacks required section {section}")]
    MissingSection { template_id: String, section: SectionKind },
    #[error("rendered prompt is {len} characters, over the budget of {budget}")]
    OverBudget { len: usize, budget: usize },
    #[error("invalid template {template_id}: {reason}")]
    InvalidTemplate { template_id: String, reason: String },
    #[error("unknown placeholder '{{{0}}}' in step text")]
    UnknownPlaceholder(String),
    #[error("malformed data block: {0}")]
    MalformedDataBlock(String),
}

/// Prompt sections, rendered in template order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SectionKind {
    EventDescription,
    HistoricalFlow,
    AdjacencyContext,
    TaskInstruction,
    OutputFormat,
}

impl SectionKind {
    pub const ALL: [SectionKind; 5] = [
        SectionKind::EventDescription,
        SectionKind::HistoricalFlow,
        SectionKind::AdjacencyContext,
        SectionKind::TaskInstruction,
        SectionKind::OutputFormat,
    ];
    pub const REQUIRED: [SectionKind; 2] = [SectionKind::TaskInstruction, SectionKind::OutputFormat];

    pub fn heading(&self) -> &'static str {
        match self {
            SectionKind::EventDescription => "## Delay event",
            SectionKind::HistoricalFlow => "## Historical passenger flow",
            SectionKind::AdjacencyContext => "## Network context",
            SectionKind::TaskInstruction => "## Task",
            SectionKind::OutputFormat => "## Output format",
        }
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SectionKind::EventDescription => "event-description",
            SectionKind::HistoricalFlow => "historical-flow",
            SectionKind::AdjacencyContext => "adjacency-context",
            SectionKind::TaskInstruction => "task-instruction",
            SectionKind::OutputFormat => "output-format",
        })
    }
}

/// Reasoning dimension a chain-of-thought step can cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CotKind {
    Temporal,
    EventSeverity,
    SpatialSpread,
}

impl CotKind {
    pub const ALL: [CotKind; 3] = [CotKind::Temporal, CotKind::EventSeverity, CotKind::SpatialSpread];

    pub fn code(&self) -> &'static str {
        match self {
            CotKind::Temporal => "t",
            CotKind::EventSeverity => "es",
            CotKind::SpatialSpread => "ss",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CotKind::Temporal => "temporal",
            CotKind::EventSeverity => "event severity",
            CotKind::SpatialSpread => "spatial spread",
        }
    }

    /// Default step text. Placeholders are filled per task at render time.
    pub fn default_step_text(&self) -> &'static str {
        match self {
            CotKind::Temporal => {
                "The forecast window starts at {window_start} on {date}, a {day_type}. Compare the latest \
                 observations ({recent_summary}) with the same period on the comparable days \
                 ({comparable_summary}) and state how far the current level departs from the usual pattern."
            }
            CotKind::EventSeverity => {
                "Assess the delay situation: {event_summary}. Judge how strongly it suppresses or postpones \
                 {direction_phrase} at {station}, taking the fault type and its duration into account."
            }
            CotKind::SpatialSpread => {
                "Consider the spatial reach: {scope_summary}. {station} connects directly to {neighbors}. \
                 Decide whether the disruption can spread along the line or to a wider area and what that \
                 implies for {station}."
            }
        }
    }
}

impl FromStr for CotKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "t" | "temporal" => Ok(CotKind::Temporal),
            "es" | "event-severity" | "severity" => Ok(CotKind::EventSeverity),
            "ss" | "spatial-spread" | "spatial" => Ok(CotKind::SpatialSpread),
            other => Err(format!("unknown reasoning dimension '{other}'")),
        }
    }
}

/// One reasoning dimension together with its step text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CotDimension {
    pub kind: CotKind,
    pub step_text_spec: String,
}

impl CotDimension {
    pub fn standard(kind: CotKind) -> Self {
        Self {
            kind,
            step_text_spec: kind.default_step_text().to_string(),
        }
    }
}

/// How reasoning steps relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    /// Independent steps side by side.
    Parallel,
    /// Each step builds on the previous step's conclusion.
    Nested,
}

impl Structure {
    pub const ALL: [Structure; 2] = [Structure::Parallel, Structure::Nested];

    pub fn code(&self) -> &'static str {
        match self {
            Structure::Parallel => "parallel",
            Structure::Nested => "nested",
        }
    }
}

impl FromStr for Structure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "parallel" => Ok(Structure::Parallel),
            "nested" => Ok(Structure::Nested),
            other => Err(format!("unknown structure '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetailLevel {
    Brief,
    Standard,
    Verbose,
}

impl DetailLevel {
    pub const ALL: [DetailLevel; 3] = [DetailLevel::Brief, DetailLevel::Standard, DetailLevel::Verbose];

    pub fn code(&self) -> &'static str {
        match self {
            DetailLevel::Brief => "brief",
            DetailLevel::Standard => "standard",
            DetailLevel::Verbose => "verbose",
        }
    }
}

impl FromStr for DetailLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "brief" => Ok(DetailLevel::Brief),
            "standard" => Ok(DetailLevel::Standard),
            "verbose" => Ok(DetailLevel::Verbose),
            other => Err(format!("unknown detail level '{other}'")),
        }
    }
}

pub const DEFAULT_HISTORY_DAYS: usize = 3;
pub const DEFAULT_TOKEN_BUDGET: usize = 12_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub sections: Vec<SectionKind>,
    /// Sorted by kind, at most one entry per kind.
    pub cot_dimensions: Vec<CotDimension>,
    pub structure: Structure,
    pub detail_level: DetailLevel,
    /// Comparable days of history shown alongside the recent window.
    pub history_days: usize,
    /// Character budget for the rendered prompt.
    pub token_budget: usize,
    /// Template this one was refined from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
}

impl PromptTemplate {
    pub fn cot_kinds(&self) -> BTreeSet<CotKind> {
        self.cot_dimensions.iter().map(|d| d.kind).collect()
    }

    pub fn has_dimension(&self, kind: CotKind) -> bool {
        self.cot_dimensions.iter().any(|d| d.kind == kind)
    }

    pub fn is_refined(&self) -> bool {
        self.parent_id.is_some()
    }

    /// Required sections that are absent.
    pub fn missing_sections(&self) -> Vec<SectionKind> {
        SectionKind::REQUIRED
            .into_iter()
            .filter(|s| !self.sections.contains(s))
            .collect()
    }
}

/// Short code for a set of reasoning dimensions, e.g. `t+ss` or `none`.
pub fn dimensions_code(kinds: &BTreeSet<CotKind>) -> String {
    if kinds.is_empty() {
        "none".to_string()
    } else {
        kinds.iter().map(CotKind::code).collect::<Vec<_>>().join("+")
    }
}

/// All 2^3 subsets of reasoning dimensions, smallest first.
pub fn all_dimension_subsets() -> Vec<BTreeSet<CotKind>> {
    (0u8..8)
        .map(|mask| {
            CotKind::ALL
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, k)| *k)
                .collect()
        })
        .collect::<BTreeSet<BTreeSet<CotKind>>>()
        .into_iter()
        .collect()
}

/// The option axes a template library is enumerated over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateAxes {
    pub id_prefix: String,
    pub cot_subsets: Vec<BTreeSet<CotKind>>,
    pub structures: Vec<Structure>,
    pub detail_levels: Vec<DetailLevel>,
    pub history_days: usize,
    pub token_budget: usize,
}

impl Default for TemplateAxes {
    fn default() -> Self {
        Self {
            id_prefix: "gen".to_string(),
            cot_subsets: all_dimension_subsets(),
            structures: Structure::ALL.to_vec(),
            detail_levels: DetailLevel::ALL.to_vec(),
            history_days: DEFAULT_HISTORY_DAYS,
            token_budget: DEFAULT_TOKEN_BUDGET,
        }
    }
}

impl TemplateAxes {
    /// Descriptive templates without reasoning steps, one per detail level.
    pub fn descriptive() -> Self {
        Self {
            cot_subsets: vec![BTreeSet::new()],
            structures: vec![Structure::Parallel],
            ..Self::default()
        }
    }
}

/// Enumerates the Cartesian product of the configured axes in a fixed order.
pub fn generate_template_library(axes: &TemplateAxes) -> Result<Vec<PromptTemplate>, PromptError> {
    if axes.cot_subsets.is_empty() {
        return Err(PromptError::EmptyAxis("cot_subsets"));
    }
    if axes.structures.is_empty() {
        return Err(PromptError::EmptyAxis("structures"));
    }
    if axes.detail_levels.is_empty() {
        return Err(PromptError::EmptyAxis("detail_levels"));
    }
    let mut library = Vec::with_capacity(axes.cot_subsets.len() * axes.structures.len() * axes.detail_levels.len());
    for subset in &axes.cot_subsets {
        for &structure in &axes.structures {
            for &detail_level in &axes.detail_levels {
                library.push(PromptTemplate {
                    template_id: format!(
                        "{}-{}-{}-{}",
                        axes.id_prefix,
                        dimensions_code(subset),
                        structure.code(),
                        detail_level.code()
                    ),
                    sections: SectionKind::ALL.to_vec(),
                    cot_dimensions: subset.iter().map(|k| CotDimension::standard(*k)).collect(),
                    structure,
                    detail_level,
                    history_days: axes.history_days,
                    token_budget: axes.token_budget,
                    parent_id: None,
                });
            }
        }
    }
    Ok(library)
}

/// Serialises a library as a pretty-printed JSON array.
pub fn library_to_json(library: &[PromptTemplate]) -> String {
    serde_json::to_string_pretty(library).expect("templates serialise")
}

pub fn library_from_json(json: &str) -> Result<Vec<PromptTemplate>, serde_json::Error> {
    serde_json::from_str(json)
}

/// `{task_id}_{template_id}.txt`, with the `/` of refined ids replaced by `~`.
pub fn prompt_file_name(task: &ForecastTask, template_id: &str) -> String {
    format!("{}_{}.txt", task.task_id, template_id.replace('/', "~"))
}
