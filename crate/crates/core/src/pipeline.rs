//! Run configuration and the end-to-end commands behind the CLI.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{backend_from_config, BackendConfig, BackendError};
use crate::baselines::ArimaParams;
use crate::bins::DateRange;
use crate::eval::{
    emit_plot_data, generate_tasks, run_experiment, EvalError, ExperimentOutcome, ExperimentReport,
    ExperimentSpec, ModelKind, Split,
};
use crate::ingest::{
    aggregate_flows, clean, parse_afc, remove_outliers, write_flow_csv, AfcFormat, FlowDirection, FlowStore,
    IngestError, OutlierRule, StationRegistry,
};
use crate::prompt::{
    generate_template_library, library_to_json, prompt_file_name, render, InformationRepository, PromptError,
    TemplateAxes,
};
use crate::refine::{score_templates, screen, select_best, write_scores_csv, RefineError, RefinementAxes, ScreenRules};
use crate::synth::{generate, SynthConfig, SynthError};
use crate::topology::{load_adjacency, load_events, AdjacencyMatrix, DelayEvent, TopologyError};

pub const AFC_FILE: &str = "afc.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const FLOWS_FILE: &str = "flows.csv";
pub const RESULTS_FILE: &str = "results.json";

/// Process exit code when a model report is incomplete.
pub const EXIT_INCOMPLETE: i32 = 2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub afc: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

impl SplitConfig {
    fn to_split(self) -> Split {
        Split {
            train: DateRange::new(self.train_start, self.train_end),
            test: DateRange::new(self.test_start, self.test_end),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotConfig {
    pub station: Option<String>,
    pub direction: Option<FlowDirection>,
    pub date: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    /// Library P1 is chosen from.
    pub generation: TemplateAxes,
    /// Library `score-templates` scores.
    pub library: TemplateAxes,
    pub refinement: RefinementAxes,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            generation: TemplateAxes::descriptive(),
            library: TemplateAxes::default(),
            refinement: RefinementAxes::default(),
        }
    }
}

/// Everything a run needs. Serialised as TOML; any key can be overridden
/// with `key.path=value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// History length in bins.
    pub d: usize,
    /// Horizon in bins.
    pub u: usize,
    pub models: Vec<ModelKind>,
    pub focus_delay: bool,
    pub validation_days: usize,
    pub scope_hops: usize,
    pub unreliable_threshold: f64,
    pub incomplete_threshold: f64,
    pub paths: PathsConfig,
    pub split: Option<SplitConfig>,
    pub outlier: OutlierRule,
    pub arima: ArimaParams,
    pub backend: BackendConfig,
    pub templates: TemplateConfig,
    pub plot: PlotConfig,
    /// Generates the inputs when paths are not given.
    pub synth: Option<SynthConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("runs"),
            d: 12,
            u: 6,
            models: ModelKind::ALL.to_vec(),
            focus_delay: true,
            validation_days: 2,
            scope_hops: crate::prompt::DEFAULT_SCOPE_HOPS,
            unreliable_threshold: crate::refine::DEFAULT_UNRELIABLE_THRESHOLD,
            incomplete_threshold: 0.5,
            paths: PathsConfig::default(),
            split: None,
            outlier: OutlierRule::default(),
            arima: ArimaParams::default(),
            backend: BackendConfig::default(),
            templates: TemplateConfig::default(),
            plot: PlotConfig::default(),
            synth: None,
        }
    }
}

impl RunConfig {
    /// A config that generates the default synthetic dataset.
    pub fn synthetic() -> Self {
        Self {
            synth: Some(SynthConfig::default()),
            ..Self::default()
        }
    }

    /// Reads `path`, or starts from [`RunConfig::synthetic`] when there is
    /// none, then applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(p))?;
                text.parse::<toml::Table>()
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::try_from(RunConfig::synthetic())
                .map_err(|e| PipelineError::Config(e.to_string()))?,
        };
        for (key, value) in overrides {
            set_key(&mut table, key, value)?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        config.sync_seed();
        Ok(config)
    }

    /// The top-level seed drives the synthetic generator.
    pub fn sync_seed(&mut self) {
        if let Some(s) = &mut self.synth {
            s.seed = self.seed;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.models.is_empty() {
            return Err(PipelineError::Config("models must not be empty".into()));
        }
        self.backend.validate()?;
        let has_paths = self.paths.afc.is_some() && self.paths.adjacency.is_some();
        if !has_paths && self.synth.is_none() {
            return Err(PipelineError::Config(
                "set paths.afc and paths.adjacency, or add a [synth] section".into(),
            ));
        }
        for p in [&self.paths.afc, &self.paths.events, &self.paths.adjacency].into_iter().flatten() {
            if !p.exists() {
                return Err(PipelineError::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Sets a dotted `key` in `table`. The value is read as TOML when it parses,
/// otherwise as a string.
fn set_key(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), PipelineError> {
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("override '{key}': '{part}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn create_file(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io_err(path))
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub dir: PathBuf,
    pub afc: PathBuf,
    pub events: PathBuf,
    pub adjacency: PathBuf,
    pub n_stations: usize,
    pub n_days: usize,
    pub n_records: u64,
    pub n_events: usize,
}

/// Writes the synthetic AFC, event and adjacency files plus a manifest into `dir`.
pub fn cmd_synth(config: &RunConfig, dir: &Path) -> Result<SynthSummary, PipelineError> {
    let synth = config
        .synth
        .clone()
        .ok_or_else(|| PipelineError::Config("no [synth] section in config".into()))?;
    let dataset = generate(&synth)?;
    create_dir(dir)?;
    let afc = dir.join(AFC_FILE);
    let events = dir.join(EVENTS_FILE);
    let adjacency = dir.join(ADJACENCY_FILE);
    let mut w = create_file(&afc)?;
    dataset.write_afc(&mut w)?;
    w.flush().map_err(io_err(&afc))?;
    dataset.write_events(create_file(&events)?)?;
    dataset.write_adjacency(create_file(&adjacency)?)?;
    let summary = SynthSummary {
        dir: dir.to_path_buf(),
        afc,
        events,
        adjacency,
        n_stations: synth.n_stations,
        n_days: synth.n_days,
        n_records: dataset.record_count(),
        n_events: dataset.events.len(),
    };
    let manifest = serde_json::json!({
        "seed": synth.seed,
        "synth": synth,
        "records": summary.n_records,
        "events": summary.n_events,
    });
    write_text(&dir.join("synth_manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub n_records: usize,
    pub rejected: usize,
    pub dropped_outside_hours: usize,
    pub dropped_unknown_station: usize,
    pub outliers_replaced: usize,
    pub n_series: usize,
    pub inflow_total: u64,
    pub outflow_total: u64,
    pub warnings: Vec<String>,
}

/// Parsed, cleaned and aggregated inputs.
pub struct Inputs {
    pub flows: FlowStore,
    pub events: Vec<DelayEvent>,
    pub adjacency: AdjacencyMatrix,
    pub summary: IngestSummary,
    pub files: Vec<(String, PathBuf)>,
}

fn resolve_paths(config: &RunConfig, data_dir: &Path) -> Result<(PathBuf, Option<PathBuf>, PathBuf), PipelineError> {
    match (&config.paths.afc, &config.paths.adjacency) {
        (Some(afc), Some(adj)) => Ok((afc.clone(), config.paths.events.clone(), adj.clone())),
        _ => {
            let s = cmd_synth(config, data_dir)?;
            Ok((s.afc, Some(s.events), s.adjacency))
        }
    }
}

/// Reads and cleans the inputs named by `afc`, `events` and `adjacency`.
pub fn load_inputs(
    afc: &Path,
    events: Option<&Path>,
    adjacency: &Path,
    outlier: &OutlierRule,
    training: Option<DateRange>,
) -> Result<Inputs, PipelineError> {
    let adjacency_matrix = load_adjacency(File::open(adjacency).map_err(io_err(adjacency))?)?;
    let registry = StationRegistry::new(adjacency_matrix.stations().iter().cloned());
    let mut warnings = Vec::new();

    let is_empty = fs::metadata(afc).map_err(io_err(afc))?.len() == 0;
    let parsed = if is_empty {
        warnings.push(format!("{} is empty; no flows produced", afc.display()));
        Default::default()
    } else {
        parse_afc(BufReader::new(File::open(afc).map_err(io_err(afc))?), &AfcFormat::default())?
    };
    for d in parsed.rejected.iter().take(10) {
        log::warn!("{} row {}: {}", afc.display(), d.row, d.reason);
    }
    let cleaned = clean(&parsed.records, &registry);
    let mut flows = aggregate_flows(&cleaned.records, &registry);
    let inflow_total = flows.total(FlowDirection::Inflow);
    let outflow_total = flows.total(FlowDirection::Outflow);
    let outliers_replaced = match training {
        Some(t) => remove_outliers(&mut flows, outlier, t),
        None => 0,
    };

    let mut event_list = Vec::new();
    if let Some(path) = events {
        let catalog = load_events(File::open(path).map_err(io_err(path))?)?;
        for d in &catalog.rejected {
            warnings.push(format!("{} row {}: {}", path.display(), d.row, d.reason));
        }
        event_list = catalog.events;
    }
    let mut files = vec![("afc".to_string(), afc.to_path_buf()), ("adjacency".to_string(), adjacency.to_path_buf())];
    if let Some(e) = events {
        files.push(("events".to_string(), e.to_path_buf()));
    }
    Ok(Inputs {
        summary: IngestSummary {
            n_records: parsed.records.len(),
            rejected: parsed.rejected.len(),
            dropped_outside_hours: cleaned.dropped_outside_hours,
            dropped_unknown_station: cleaned.dropped_unknown_station,
            outliers_replaced,
            n_series: flows.len(),
            inflow_total,
            outflow_total,
            warnings,
        },
        flows,
        events: event_list,
        adjacency: adjacency_matrix,
        files,
    })
}

/// Parses, cleans and aggregates the AFC file; writes `flows.csv` to `dir`.
pub fn cmd_ingest(config: &RunConfig, dir: &Path) -> Result<IngestSummary, PipelineError> {
    create_dir(dir)?;
    let (afc, events, adjacency) = resolve_paths(config, &dir.join("data"))?;
    let training = config.split.map(|s| s.to_split().train);
    let inputs = load_inputs(&afc, events.as_deref(), &adjacency, &config.outlier, training)?;
    let path = dir.join(FLOWS_FILE);
    write_flow_csv(&inputs.flows, create_file(&path)?)?;
    Ok(inputs.summary)
}

/// Test range is the trailing third of the observed dates (at least one day).
pub fn default_split(flows: &FlowStore) -> Result<Split, PipelineError> {
    let dates: Vec<NaiveDate> = flows.dates().into_iter().collect();
    if dates.len() < 2 {
        return Err(PipelineError::Config(format!(
            "need at least 2 days of flows to split, found {}",
            dates.len()
        )));
    }
    let n_test = (dates.len() / 3).max(1);
    let cut = dates.len() - n_test;
    Ok(Split {
        train: DateRange::new(dates[0], dates[cut - 1]),
        test: DateRange::new(dates[cut], dates[dates.len() - 1]),
    })
}

fn experiment_spec(config: &RunConfig, split: Split) -> ExperimentSpec {
    ExperimentSpec {
        split,
        d: config.d,
        u: config.u,
        models: config.models.clone(),
        focus_filter: config.focus_delay,
        generation: config.templates.generation.clone(),
        refinement: config.templates.refinement.clone(),
        validation_days: config.validation_days,
        unreliable_threshold: config.unreliable_threshold,
        incomplete_threshold: config.incomplete_threshold,
        arima: config.arima,
    }
}

/// `{UTC timestamp}-{first 8 hex digits of the config hash}`.
pub fn run_id(config_hash: &str) -> String {
    format!("{}-{}", Utc::now().format("%Y%m%dT%H%M%SZ"), &config_hash[..8])
}

fn fresh_run_dir(out: &Path, id: &str) -> Result<(String, PathBuf), PipelineError> {
    create_dir(out)?;
    let mut candidate = id.to_string();
    let mut k = 1;
    while out.join(&candidate).exists() {
        k += 1;
        candidate = format!("{id}-{k}");
    }
    let dir = out.join(&candidate);
    create_dir(&dir)?;
    Ok((candidate, dir))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub exit_code: i32,
    pub headline: String,
}

fn prepare(config: &RunConfig, run_dir: &Path) -> Result<(InformationRepository, Split, Inputs), PipelineError> {
    let (afc, events, adjacency) = resolve_paths(config, &run_dir.join("data"))?;
    // The split may depend on the observed dates, so outliers are handled
    // after it is known.
    let mut inputs = load_inputs(&afc, events.as_deref(), &adjacency, &OutlierRule::default(), None)?;
    let split = match config.split {
        Some(s) => s.to_split(),
        None => default_split(&inputs.flows)?,
    };
    inputs.summary.outliers_replaced = remove_outliers(&mut inputs.flows, &config.outlier, split.train);
    let (repo, diagnostics) = InformationRepository::build(
        inputs.flows.clone(),
        inputs.events.clone(),
        inputs.adjacency.clone(),
        config.scope_hops,
    )?;
    for d in &diagnostics {
        inputs.summary.warnings.push(d.to_string());
    }
    Ok((repo, split, inputs))
}

fn plot_target(config: &RunConfig, repo: &InformationRepository, split: &Split) -> Option<(String, FlowDirection, NaiveDate)> {
    let direction = config.plot.direction.unwrap_or(FlowDirection::Outflow);
    let event = repo.events().iter().find(|e| split.test.contains(e.date));
    let station = config
        .plot
        .station
        .clone()
        .or_else(|| event.map(|e| e.interval_to.clone()))
        .or_else(|| repo.station_registry().first().cloned())?;
    let date = config.plot.date.or(event.map(|e| e.date)).unwrap_or(split.test.start);
    Some((station, direction, date))
}

fn write_report_pair(dir: &Path, stem: &str, report: &ExperimentReport) -> Result<(), PipelineError> {
    write_text(&dir.join(format!("{stem}.md")), &report.render_markdown())?;
    let path = dir.join(format!("{stem}.csv"));
    report.write_csv(create_file(&path)?)?;
    Ok(())
}

fn archive_replies(dir: &Path, outcome: &ExperimentOutcome) -> Result<(), PipelineError> {
    for (model, replies) in &outcome.replies {
        let model_dir = dir.join("replies").join(model);
        create_dir(&model_dir)?;
        for (task_id, raw) in replies {
            write_text(&model_dir.join(format!("{task_id}.txt")), raw)?;
        }
    }
    Ok(())
}

/// Writes the selected templates and their prompt for the first test task.
fn export_selected(
    dir: &Path,
    outcome: &ExperimentOutcome,
    repo: &InformationRepository,
    spec: &ExperimentSpec,
) -> Result<(), PipelineError> {
    let selected: Vec<_> = [&outcome.p1, &outcome.p2]
        .into_iter()
        .flatten()
        .map(|s| s.selected.clone())
        .collect();
    if selected.is_empty() {
        return Ok(());
    }
    write_text(&dir.join("templates.json"), &library_to_json(&selected))?;
    let sample = generate_tasks(repo.flows(), spec.split.test, spec.d, spec.u)?.tasks.into_iter().next();
    if let Some(lt) = sample {
        let prompts = dir.join("prompts");
        create_dir(&prompts)?;
        for t in &selected {
            let rendered = render(t, repo, &lt.task)?;
            write_text(&prompts.join(prompt_file_name(&lt.task, &t.template_id)), &rendered.text)?;
        }
    }
    Ok(())
}

/// Full pipeline: ingest, select P1 and P2, run baselines, evaluate, and
/// write reports, plot data and a manifest under `{out}/{run_id}/`.
pub fn cmd_run(config: &RunConfig) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let backend = backend_from_config(&config.backend)?;
    let hash = config.hash();
    let (id, dir) = fresh_run_dir(&config.out, &run_id(&hash))?;
    log::info!("run {id} in {}", dir.display());
    let (repo, split, inputs) = prepare(config, &dir)?;
    let spec = experiment_spec(config, split);
    let outcome = run_experiment(&spec, &repo, backend.as_ref())?;

    write_text(&dir.join("config.toml"), &config.to_toml())?;
    write_report_pair(&dir, "report", &outcome.headline)?;
    if let Some(full) = &outcome.secondary {
        write_report_pair(&dir, "report_full", full)?;
    }
    let mut plot_file = None;
    if let Some((station, direction, date)) = plot_target(config, &repo, &split) {
        match emit_plot_data(outcome.full_report(), &station, direction, date) {
            Ok(table) => {
                let path = dir.join("plot_data.csv");
                table.write_csv(create_file(&path)?)?;
                plot_file = Some(serde_json::json!({
                    "file": "plot_data.csv", "station": station, "direction": direction, "date": date
                }));
            }
            Err(e) => log::warn!("no plot data: {e}"),
        }
    }
    for (name, stage) in [("p1", &outcome.p1), ("p2", &outcome.p2)] {
        if let Some(stage) = stage {
            let path = dir.join(format!("scores_{name}.csv"));
            write_scores_csv(&stage.scores, create_file(&path)?)?;
        }
    }
    archive_replies(&dir, &outcome)?;
    export_selected(&dir, &outcome, &repo, &spec)?;
    write_text(&dir.join(RESULTS_FILE), &serde_json::to_string(&outcome)?)?;

    let mut inputs_json = serde_json::Map::new();
    for (role, path) in &inputs.files {
        inputs_json.insert(
            role.clone(),
            serde_json::json!({ "path": path, "sha256": sha256_file(path)? }),
        );
    }
    let manifest = serde_json::json!({
        "run_id": id,
        "created_at": Utc::now().to_rfc3339(),
        "config_hash": hash,
        "seed": config.seed,
        "config": config,
        "inputs": inputs_json,
        "ingest": inputs.summary,
        "split": split,
        "backend_id": outcome.backend_id,
        "p1_template": outcome.p1.as_ref().map(|s| &s.selected.template_id),
        "p2_template": outcome.p2.as_ref().map(|s| &s.selected.template_id),
        "n_validation_tasks": outcome.n_validation_tasks,
        "n_tasks": outcome.headline.n_tasks,
        "n_tasks_full": outcome.full_report().n_tasks,
        "skipped_windows": outcome.skipped_tasks,
        "population": outcome.headline.population,
        "models": outcome.headline.models.iter().map(|m| serde_json::json!({
            "model": m.model, "n": m.n, "n_failures": m.n_failures, "incomplete": m.incomplete,
            "template_id": m.template_id, "backend_id": m.backend_id,
        })).collect::<Vec<_>>(),
        "plot": plot_file,
    });
    write_text(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;

    Ok(RunSummary {
        run_id: id,
        run_dir: dir,
        exit_code: if outcome.headline.any_incomplete() { EXIT_INCOMPLETE } else { 0 },
        headline: outcome.headline.render_markdown(),
    })
}

#[derive(Debug, Clone)]
pub struct ScoreSummary {
    pub run_dir: PathBuf,
    pub best: String,
    pub n_templates: usize,
    pub n_screened_out: usize,
    pub n_validation_tasks: usize,
}

/// Screens and scores the configured template library on validation tasks.
pub fn cmd_score_templates(config: &RunConfig) -> Result<ScoreSummary, PipelineError> {
    config.validate()?;
    let backend = backend_from_config(&config.backend)?;
    let hash = config.hash();
    let (_, dir) = fresh_run_dir(&config.out, &format!("scores-{}", run_id(&hash)))?;
    let (repo, split, _) = prepare(config, &dir)?;
    let spec = experiment_spec(config, split);
    spec.validate()?;
    let range = spec.validation_range();
    let tasks = generate_tasks(repo.flows(), range, config.d, config.u)?.tasks;
    if tasks.is_empty() {
        return Err(EvalError::NoValidationTasks(range.start, range.end).into());
    }
    let library = generate_template_library(&config.templates.library)?;
    write_text(&dir.join("library.json"), &library_to_json(&library))?;
    let screened = screen(&library, &ScreenRules { probe: tasks[0].task.clone() }, &repo)?;
    let scores = score_templates(&screened.retained, &tasks, &repo, backend.as_ref(), config.unreliable_threshold);
    write_scores_csv(&scores, create_file(&dir.join("scores.csv"))?)?;
    let best = select_best(&scores)?;
    write_text(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&serde_json::json!({
            "config_hash": hash,
            "created_at": Utc::now().to_rfc3339(),
            "config": config,
            "backend_id": backend.backend_id(),
            "selected": best,
            "screened_out": screened.diagnostics,
            "n_validation_tasks": tasks.len(),
        }))?,
    )?;
    Ok(ScoreSummary {
        run_dir: dir,
        best,
        n_templates: library.len(),
        n_screened_out: screened.diagnostics.len(),
        n_validation_tasks: tasks.len(),
    })
}

/// Re-renders the stored reports of a finished run.
pub fn cmd_report(run_dir: &Path) -> Result<(String, i32), PipelineError> {
    let path = run_dir.join(RESULTS_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let outcome: ExperimentOutcome = serde_json::from_str(&text)?;
    let mut out = outcome.headline.render_markdown();
    if let Some(full) = &outcome.secondary {
        out.push('\n');
        out.push_str(&full.render_markdown());
    }
    let code = if outcome.headline.any_incomplete() { EXIT_INCOMPLETE } else { 0 };
    Ok((out, code))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_dotted_keys() {
        let cfg = RunConfig::load(
            None,
            &[
                ("backend.kind".into(), "remote-chat".into()),
                ("d".into(), "8".into()),
                ("models".into(), "[\"seasonal-naive\"]".into()),
                ("out".into(), "/tmp/x y".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.d, 8);
        assert_eq!(cfg.models, vec![ModelKind::SeasonalNaive]);
        assert_eq!(cfg.backend.kind, crate::backend::BackendKind::RemoteChat);
        assert_eq!(cfg.out, PathBuf::from("/tmp/x y"));
    }

    #[test]
    fn bad_override_is_a_config_error() {
        assert!(matches!(
            RunConfig::load(None, &[("d".into(), "\"many\"".into())]),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            RunConfig::load(None, &[("d..x".into(), "1".into())]),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn toml_round_trip_and_stable_hash() {
        let cfg = RunConfig::synthetic();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = RunConfig { seed: 7, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn seed_drives_the_generator() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 9\n[synth]\nn_stations = 4\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.synth.as_ref().unwrap().seed, 9);
        assert_eq!(cfg.synth.as_ref().unwrap().n_stations, 4);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let cfg = RunConfig::default();
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        let cfg = RunConfig {
            paths: PathsConfig {
                afc: Some("/nonexistent/afc.csv".into()),
                adjacency: Some("/nonexistent/adj.csv".into()),
                events: None,
            },
            ..RunConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("does not exist"));
    }

    #[test]
    fn default_split_takes_trailing_third() {
        let ds = generate(&SynthConfig {
            n_stations: 2,
            delays: Vec::new(),
            ..SynthConfig::default()
        })
        .unwrap();
        let split = default_split(&ds.flow_store()).unwrap();
        assert_eq!(split.test.start, NaiveDate::from_ymd_opt(2019, 8, 19).unwrap());
        assert_eq!(split.test.end, NaiveDate::from_ymd_opt(2019, 8, 25).unwrap());
        assert_eq!(split.train.end, NaiveDate::from_ymd_opt(2019, 8, 18).unwrap());
    }

    #[test]
    fn run_ids_embed_the_hash() {
        let id = run_id("0123456789abcdef");
        assert!(id.ends_with("-01234567"));
        assert_eq!(id.len(), "20190101T000000Z-01234567".len());
    }
}
