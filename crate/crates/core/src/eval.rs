//! Error metrics, task generation, experiment orchestration and report
//! emission.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ForecastBackend, ForecastTask};
use crate::baselines::{fit, ArimaParams, BaselineError, BaselineKind, BaselineModel};
use crate::bins::{DateRange, TimeBin, BINS_PER_DAY, BIN_MINUTES};
use crate::ingest::{FlowDirection, FlowStore};
use crate::prompt::{
    generate_template_library, render, InformationRepository, PromptError, PromptTemplate, TemplateAxes,
};
use crate::refine::{
    bounded_map, refinement_candidates, score_templates, screen, select_best, RefineError, RefinementAxes,
    ScreenDiagnostic, ScreenRules, TemplateScore, DEFAULT_UNRELIABLE_THRESHOLD,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("length mismatch: {truth} truth values vs {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("empty input")]
    Empty,
}

fn check_lengths(truth: &[f64], pred: &[f64]) -> Result<(), MetricError> {
    if truth.len() != pred.len() {
        return Err(MetricError::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    check_lengths(truth, pred)?;
    let mut sums = ErrorSums::default();
    truth.iter().zip(pred).for_each(|(t, p)| sums.add(*t, *p));
    Ok(sums.rmse())
}

/// Mean absolute error.
pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    check_lengths(truth, pred)?;
    let mut sums = ErrorSums::default();
    truth.iter().zip(pred).for_each(|(t, p)| sums.add(*t, *p));
    Ok(sums.mae())
}

/// Running sums behind RMSE and MAE. Adding values in a fixed order gives
/// bit-identical metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorSums {
    pub sum_sq: f64,
    pub sum_abs: f64,
    pub n: usize,
}

impl ErrorSums {
    pub fn add(&mut self, truth: f64, pred: f64) {
        let e = pred - truth;
        self.sum_sq += e * e;
        self.sum_abs += e.abs();
        self.n += 1;
    }

    /// NaN when empty.
    pub fn rmse(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.sum_sq / self.n as f64).sqrt()
        }
    }

    pub fn mae(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum_abs / self.n as f64
        }
    }
}

/// Serialises NaN as `null` and reads `null` back as NaN.
pub(crate) mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// A task together with its observed values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTask {
    pub task: ForecastTask,
    pub truth: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaskSet {
    pub tasks: Vec<LabeledTask>,
    /// Windows dropped because history or truth was missing.
    pub skipped: usize,
}

/// One task per series and forecast window. Windows start at bins 0, u, 2u,
/// ... of each date in `dates`, so every covered bin is forecast exactly
/// once. History may reach back into the previous service day.
pub fn generate_tasks(store: &FlowStore, dates: DateRange, d: usize, u: usize) -> Result<TaskSet, EvalError> {
    if d == 0 || u == 0 || u > usize::from(BINS_PER_DAY) {
        return Err(EvalError::Spec(format!("invalid history {d} or horizon {u}")));
    }
    let mut set = TaskSet::default();
    for series in store.iter() {
        for date in series.dates().into_iter().filter(|x| dates.contains(*x)) {
            let mut start = 0usize;
            while start + u <= usize::from(BINS_PER_DAY) {
                let first = TimeBin::new(date, start as u16).expect("bin in range");
                start += u;
                let anchor = first.pred();
                let truth = series.following(anchor, u);
                if series.window_ending(anchor, d).is_none() || truth.is_none() {
                    set.skipped += 1;
                    continue;
                }
                let task = ForecastTask::new(
                    ForecastTask::standard_id(&series.station_id, series.direction, first),
                    series.station_id.clone(),
                    series.direction,
                    anchor,
                    d,
                    u,
                )
                .expect("window stays within the day");
                set.tasks.push(LabeledTask {
                    task,
                    truth: truth.unwrap().into_iter().map(|(_, v)| v).collect(),
                });
            }
        }
    }
    Ok(set)
}

/// Whether the task's forecast window overlaps a delay at one of the
/// event's affected stations.
pub fn in_delay_window(repo: &InformationRepository, task: &ForecastTask) -> bool {
    let bins = task.target_bins();
    let first = bins[0];
    let end = bins[bins.len() - 1].start_minute() + BIN_MINUTES;
    !repo
        .events_touching(&task.station_id, first.service_date, first.start_minute(), end)
        .is_empty()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    HistoricalAverage,
    SeasonalNaive,
    Arima,
    /// Best template of the unrefined generation library.
    P1,
    /// Best refinement of the P1 template.
    P2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::HistoricalAverage,
        ModelKind::SeasonalNaive,
        ModelKind::Arima,
        ModelKind::P1,
        ModelKind::P2,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::HistoricalAverage => "HistoricalAverage",
            ModelKind::SeasonalNaive => "SeasonalNaive",
            ModelKind::Arima => "ARIMA",
            ModelKind::P1 => "P1",
            ModelKind::P2 => "P2",
        }
    }

    pub fn baseline(&self) -> Option<BaselineKind> {
        match self {
            ModelKind::HistoricalAverage => Some(BaselineKind::HistoricalAverage),
            ModelKind::SeasonalNaive => Some(BaselineKind::SeasonalNaive),
            ModelKind::Arima => Some(BaselineKind::Arima),
            ModelKind::P1 | ModelKind::P2 => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "p1" => Ok(ModelKind::P1),
            "p2" => Ok(ModelKind::P2),
            other => other
                .parse::<BaselineKind>()
                .map(|b| match b {
                    BaselineKind::HistoricalAverage => ModelKind::HistoricalAverage,
                    BaselineKind::SeasonalNaive => ModelKind::SeasonalNaive,
                    BaselineKind::Arima => ModelKind::Arima,
                })
                .map_err(|_| format!("unknown model '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: DateRange,
    pub test: DateRange,
}

impl Split {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(EvalError::Spec("train and test ranges must be non-empty".into()));
        }
        if self.train.overlaps(&self.test) {
            return Err(EvalError::Spec("train and test ranges overlap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub split: Split,
    /// History length in bins.
    pub d: usize,
    /// Horizon in bins.
    pub u: usize,
    pub models: Vec<ModelKind>,
    /// Headline report restricted to delay-window tasks.
    pub focus_filter: bool,
    pub generation: TemplateAxes,
    pub refinement: RefinementAxes,
    /// Trailing training days used to score templates.
    pub validation_days: usize,
    pub unreliable_threshold: f64,
    /// Failure share above which a model report is flagged incomplete.
    pub incomplete_threshold: f64,
    pub arima: ArimaParams,
}

impl ExperimentSpec {
    pub fn new(split: Split) -> Self {
        Self {
            split,
            d: 12,
            u: 6,
            models: ModelKind::ALL.to_vec(),
            focus_filter: true,
            generation: TemplateAxes::descriptive(),
            refinement: RefinementAxes::default(),
            validation_days: 2,
            unreliable_threshold: DEFAULT_UNRELIABLE_THRESHOLD,
            incomplete_threshold: 0.5,
            arima: ArimaParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        self.split.validate()?;
        if self.models.is_empty() {
            return Err(EvalError::NoModels);
        }
        if self.d == 0 || self.u == 0 || self.u > usize::from(BINS_PER_DAY) {
            return Err(EvalError::Spec(format!("invalid d={} or u={}", self.d, self.u)));
        }
        if self.validation_days == 0 {
            return Err(EvalError::Spec("validation_days must be positive".into()));
        }
        self.arima.validate()?;
        Ok(())
    }

    /// Trailing `validation_days` of the training range.
    pub fn validation_range(&self) -> DateRange {
        let back = self.validation_days.saturating_sub(1) as u64;
        let start = (self.split.train.end - chrono::Days::new(back)).max(self.split.train.start);
        DateRange::new(start, self.split.train.end)
    }

    fn needs_prompts(&self) -> bool {
        self.models.iter().any(|m| m.baseline().is_none())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error("no models in report")]
    NoModels,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("no validation tasks in {0}..{1}")]
    NoValidationTasks(NaiveDate, NaiveDate),
    #[error("no residuals for {station} {direction} on {date}")]
    UnknownPlotTarget {
        station: String,
        direction: FlowDirection,
        date: NaiveDate,
    },
    #[error("plot data row {row}: {reason}")]
    PlotRow { row: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Predictions and truth for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResidual {
    pub task_id: String,
    pub station_id: String,
    pub direction: FlowDirection,
    pub date: NaiveDate,
    pub bins: Vec<u16>,
    pub truth: Vec<u32>,
    pub pred: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: ModelKind,
    #[serde(with = "nan_as_null")]
    pub rmse: f64,
    #[serde(with = "nan_as_null")]
    pub mae: f64,
    /// Number of predicted values compared.
    pub n: usize,
    pub n_tasks: usize,
    pub n_failures: usize,
    pub incomplete: bool,
    #[serde(default)]
    pub template_id: Option<String>,
    #[serde(default)]
    pub backend_id: Option<String>,
    pub failures: Vec<TaskFailure>,
    pub residuals: Vec<TaskResidual>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Population {
    DelayFocus,
    Full,
}

impl Population {
    pub fn as_str(&self) -> &'static str {
        match self {
            Population::DelayFocus => "delay-focus",
            Population::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub population: Population,
    pub n_tasks: usize,
    pub models: Vec<ModelReport>,
}

impl ExperimentReport {
    pub fn any_incomplete(&self) -> bool {
        self.models.iter().any(|m| m.incomplete)
    }

    pub fn model(&self, kind: ModelKind) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == kind)
    }
}

/// Template search for one prompt variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStage {
    pub candidates: usize,
    pub screened_out: Vec<ScreenDiagnostic>,
    pub scores: Vec<TemplateScore>,
    pub selected: PromptTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub headline: ExperimentReport,
    /// Full-network report when the headline is delay-focused.
    pub secondary: Option<ExperimentReport>,
    pub p1: Option<SelectionStage>,
    pub p2: Option<SelectionStage>,
    pub n_validation_tasks: usize,
    pub skipped_tasks: usize,
    pub backend_id: String,
    /// Raw replies per model label, keyed by task id.
    #[serde(skip)]
    pub replies: BTreeMap<String, Vec<(String, String)>>,
}

impl ExperimentOutcome {
    /// The report covering every task.
    pub fn full_report(&self) -> &ExperimentReport {
        self.secondary.as_ref().unwrap_or(&self.headline)
    }
}

fn select_stage(
    library: Vec<PromptTemplate>,
    validation: &[LabeledTask],
    repo: &InformationRepository,
    backend: &dyn ForecastBackend,
    spec: &ExperimentSpec,
) -> Result<SelectionStage, EvalError> {
    let rules = ScreenRules {
        probe: validation[0].task.clone(),
    };
    let screened = screen(&library, &rules, repo)?;
    let scores = score_templates(&screened.retained, validation, repo, backend, spec.unreliable_threshold);
    let best = select_best(&scores)?;
    let selected = screened
        .retained
        .iter()
        .find(|t| t.template_id == best)
        .expect("selected template is in the library")
        .clone();
    Ok(SelectionStage {
        candidates: library.len(),
        screened_out: screened.diagnostics,
        scores,
        selected,
    })
}

struct Evaluation {
    kind: ModelKind,
    template_id: Option<String>,
    backend_id: Option<String>,
    /// Parallel to the task list.
    outcomes: Vec<Result<Vec<f64>, String>>,
    replies: Vec<(String, String)>,
}

/// Runs every model on the same task set and reports metrics.
pub fn run_experiment(
    spec: &ExperimentSpec,
    repo: &InformationRepository,
    backend: &dyn ForecastBackend,
) -> Result<ExperimentOutcome, EvalError> {
    spec.validate()?;
    let all = generate_tasks(repo.flows(), spec.split.test, spec.d, spec.u)?;
    let tasks = all.tasks;
    log::info!("{} test tasks ({} windows skipped)", tasks.len(), all.skipped);

    let (mut p1, mut p2, mut n_validation) = (None, None, 0);
    if spec.needs_prompts() {
        let range = spec.validation_range();
        let validation = generate_tasks(repo.flows(), range, spec.d, spec.u)?.tasks;
        if validation.is_empty() {
            return Err(EvalError::NoValidationTasks(range.start, range.end));
        }
        n_validation = validation.len();
        let library = generate_template_library(&spec.generation)?;
        let stage1 = select_stage(library, &validation, repo, backend, spec)?;
        log::info!("P1 template: {}", stage1.selected.template_id);
        if spec.models.contains(&ModelKind::P2) {
            let candidates = refinement_candidates(&stage1.selected, &spec.refinement)?;
            let stage2 = select_stage(candidates, &validation, repo, backend, spec)?;
            log::info!("P2 template: {}", stage2.selected.template_id);
            p2 = Some(stage2);
        }
        p1 = Some(stage1);
    }

    let mut evaluations = Vec::new();
    for &kind in &spec.models {
        let eval = match kind.baseline() {
            Some(b) => evaluate_baseline(b, spec, repo, &tasks),
            None => {
                let stage = if kind == ModelKind::P1 { &p1 } else { &p2 };
                let template = &stage.as_ref().expect("stage selected").selected;
                evaluate_prompt(kind, template, repo, backend, &tasks)
            }
        };
        evaluations.push(eval);
    }

    let focus: Vec<bool> = tasks.iter().map(|t| in_delay_window(repo, &t.task)).collect();
    let full = build_report(Population::Full, &tasks, &evaluations, |_| true, spec.incomplete_threshold);
    let (headline, secondary) = if spec.focus_filter {
        let focused = build_report(Population::DelayFocus, &tasks, &evaluations, |i| focus[i], spec.incomplete_threshold);
        (focused, Some(full))
    } else {
        (full, None)
    };
    let replies = evaluations
        .into_iter()
        .filter(|e| !e.replies.is_empty())
        .map(|e| (e.kind.label().to_string(), e.replies))
        .collect();
    Ok(ExperimentOutcome {
        headline,
        secondary,
        p1,
        p2,
        n_validation_tasks: n_validation,
        skipped_tasks: all.skipped,
        backend_id: backend.backend_id(),
        replies,
    })
}

fn evaluate_baseline(
    kind: BaselineKind,
    spec: &ExperimentSpec,
    repo: &InformationRepository,
    tasks: &[LabeledTask],
) -> Evaluation {
    let series: Vec<_> = repo.flows().iter().collect();
    let fitted: BTreeMap<(String, FlowDirection), Result<BaselineModel, String>> = bounded_map(
        rayon::current_num_threads(),
        &series,
        |s| {
            (
                (s.station_id.clone(), s.direction),
                fit(kind, &spec.arima, s, spec.split.train).map_err(|e| e.to_string()),
            )
        },
    )
    .into_iter()
    .collect();
    let outcomes = bounded_map(rayon::current_num_threads(), tasks, |lt| {
        let t = &lt.task;
        let series = repo
            .flows()
            .get(&t.station_id, t.direction)
            .ok_or_else(|| format!("no series for {}/{}", t.station_id, t.direction))?;
        let model = fitted[&(t.station_id.clone(), t.direction)].as_ref().map_err(Clone::clone)?;
        model.predict(series, t).map_err(|e| e.to_string())
    });
    Evaluation {
        kind: match kind {
            BaselineKind::HistoricalAverage => ModelKind::HistoricalAverage,
            BaselineKind::SeasonalNaive => ModelKind::SeasonalNaive,
            BaselineKind::Arima => ModelKind::Arima,
        },
        template_id: None,
        backend_id: None,
        outcomes,
        replies: Vec::new(),
    }
}

fn evaluate_prompt(
    kind: ModelKind,
    template: &PromptTemplate,
    repo: &InformationRepository,
    backend: &dyn ForecastBackend,
    tasks: &[LabeledTask],
) -> Evaluation {
    let results = bounded_map(backend.max_in_flight(), tasks, |lt| {
        let prompt = render(template, repo, &lt.task).map_err(|e| e.to_string())?;
        backend
            .forecast(&prompt)
            .map(|r| (r.predictions().iter().map(|v| f64::from(*v)).collect::<Vec<_>>(), r.raw_reply().to_string()))
            .map_err(|e| e.to_string())
    });
    let mut replies = Vec::new();
    let outcomes = results
        .into_iter()
        .zip(tasks)
        .map(|(r, lt)| {
            r.map(|(pred, raw)| {
                replies.push((lt.task.task_id.clone(), raw));
                pred
            })
        })
        .collect();
    Evaluation {
        kind,
        template_id: Some(template.template_id.clone()),
        backend_id: Some(backend.backend_id()),
        outcomes,
        replies,
    }
}

fn build_report(
    population: Population,
    tasks: &[LabeledTask],
    evaluations: &[Evaluation],
    include: impl Fn(usize) -> bool,
    incomplete_threshold: f64,
) -> ExperimentReport {
    let selected: Vec<usize> = (0..tasks.len()).filter(|i| include(*i)).collect();
    let models = evaluations
        .iter()
        .map(|e| {
            let mut sums = ErrorSums::default();
            let mut residuals = Vec::new();
            let mut failures = Vec::new();
            for &i in &selected {
                let lt = &tasks[i];
                match &e.outcomes[i] {
                    Ok(pred) => {
                        for (t, p) in lt.truth.iter().zip(pred) {
                            sums.add(f64::from(*t), *p);
                        }
                        residuals.push(TaskResidual {
                            task_id: lt.task.task_id.clone(),
                            station_id: lt.task.station_id.clone(),
                            direction: lt.task.direction,
                            date: lt.task.first_target().service_date,
                            bins: lt.task.target_bins().iter().map(|b| b.bin_index).collect(),
                            truth: lt.truth.clone(),
                            pred: pred.clone(),
                        });
                    }
                    Err(error) => failures.push(TaskFailure {
                        task_id: lt.task.task_id.clone(),
                        error: error.clone(),
                    }),
                }
            }
            let n_tasks = selected.len();
            let share = if n_tasks == 0 { 1.0 } else { failures.len() as f64 / n_tasks as f64 };
            ModelReport {
                model: e.kind,
                rmse: sums.rmse(),
                mae: sums.mae(),
                n: sums.n,
                n_tasks,
                n_failures: failures.len(),
                incomplete: share > incomplete_threshold,
                template_id: e.template_id.clone(),
                backend_id: e.backend_id.clone(),
                failures,
                residuals,
            }
        })
        .collect();
    ExperimentReport {
        population,
        n_tasks: selected.len(),
        models,
    }
}

/// Table 3 of the source study: model, RMSE, MAE.
pub const LITERATURE_TABLE: [(&str, f64, f64); 7] = [
    ("SVR", 14.43, 10.59),
    ("ARIMA", 17.52, 12.5),
    ("LSTM", 12.56, 9.03),
    ("GC-LSTM", 12.29, 7.76),
    ("Informer", 13.46, 8.95),
    ("P1", 12.86, 9.14),
    ("P2", 11.75, 8.61),
];

/// `model | rmse | mae` with the values as published.
pub fn literature_row(model: &str, rmse: f64, mae: f64) -> String {
    format!("{model} | {rmse} | {mae}")
}

pub fn render_literature_table() -> String {
    let mut s = String::from("Literature values, not reproduced (proprietary AFC data and a hosted model):\n\n");
    s.push_str("| Model | RMSE | MAE |\n|---|---|---|\n");
    for (m, r, a) in LITERATURE_TABLE {
        s.push_str(&format!("| {} |\n", literature_row(m, r, a)));
    }
    s
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "n/a".to_string()
    }
}

impl ExperimentReport {
    /// Measured metrics followed by the literature reference table.
    pub fn render_markdown(&self) -> String {
        let mut s = format!(
            "## Measured ({} tasks, population: {})\n\n| Model | RMSE | MAE | n | failures | status |\n|---|---|---|---|---|---|\n",
            self.n_tasks,
            self.population.as_str()
        );
        for m in &self.models {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                m.model,
                fmt_metric(m.rmse),
                fmt_metric(m.mae),
                m.n,
                m.n_failures,
                if m.incomplete { "incomplete" } else { "ok" }
            ));
        }
        s.push('\n');
        s.push_str(&render_literature_table());
        s
    }

    /// `model,rmse,mae,n`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "rmse", "mae", "n"])?;
        for m in &self.models {
            w.write_record([m.model.label().to_string(), m.rmse.to_string(), m.mae.to_string(), m.n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub time: TimeBin,
    pub truth: u32,
    /// One entry per model; `None` where the model has no prediction.
    pub preds: Vec<Option<f64>>,
}

/// Time-aligned truth and predictions for one station, direction and date.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub models: Vec<String>,
    pub rows: Vec<PlotRow>,
}

pub fn emit_plot_data(
    report: &ExperimentReport,
    station: &str,
    direction: FlowDirection,
    date: NaiveDate,
) -> Result<PlotTable, EvalError> {
    if report.models.is_empty() {
        return Err(EvalError::NoModels);
    }
    let mut rows: BTreeMap<u16, (u32, Vec<Option<f64>>)> = BTreeMap::new();
    let n = report.models.len();
    for (i, m) in report.models.iter().enumerate() {
        for r in m
            .residuals
            .iter()
            .filter(|r| r.station_id == station && r.direction == direction && r.date == date)
        {
            for (k, bin) in r.bins.iter().enumerate() {
                let row = rows.entry(*bin).or_insert_with(|| (r.truth[k], vec![None; n]));
                row.1[i] = Some(r.pred[k]);
            }
        }
    }
    if rows.is_empty() {
        return Err(EvalError::UnknownPlotTarget {
            station: station.to_string(),
            direction,
            date,
        });
    }
    Ok(PlotTable {
        models: report.models.iter().map(|m| m.model.label().to_string()).collect(),
        rows: rows
            .into_iter()
            .map(|(bin, (truth, preds))| PlotRow {
                time: TimeBin::new(date, bin).expect("bin in range"),
                truth,
                preds,
            })
            .collect(),
    })
}

impl PlotTable {
    /// `time,truth,<model>...`, time as `YYYY-MM-DD HH:MM`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string(), "truth".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.time.to_string(), row.truth.to_string()];
            rec.extend(row.preds.iter().map(|p| p.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, EvalError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.len() < 2 || &header[0] != "time" || &header[1] != "truth" {
            return Err(EvalError::PlotRow {
                row: 1,
                reason: "header must start with time,truth".into(),
            });
        }
        let models: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = i + 2;
            let bad = |reason: &str| EvalError::PlotRow {
                row,
                reason: reason.to_string(),
            };
            let ts = chrono::NaiveDateTime::parse_from_str(&rec[0], "%Y-%m-%d %H:%M")
                .map_err(|_| bad("unparseable time"))?;
            let time = TimeBin::from_datetime(ts).ok_or_else(|| bad("time outside service hours"))?;
            let truth = rec[1].parse().map_err(|_| bad("unparseable truth"))?;
            let preds = (2..rec.len())
                .map(|k| {
                    if rec[k].is_empty() {
                        Ok(None)
                    } else {
                        rec[k].parse::<f64>().map(Some).map_err(|_| bad("unparseable prediction"))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(PlotRow { time, truth, preds });
        }
        Ok(Self { models, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::ingest::FlowSeries;
    use crate::prompt::build_repository;
    use crate::topology::AdjacencyMatrix;
    use proptest::prelude::*;

    fn brute_rmse(t: &[f64], p: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..t.len() {
            acc += (t[i] - p[i]).powi(2);
        }
        (acc / t.len() as f64).sqrt()
    }

    #[test]
    fn hand_values() {
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 3.535534).abs() < 1e-6);
        assert_eq!(mae(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 3.5);
        assert_eq!(
            rmse(&[1.0], &[1.0, 2.0]),
            Err(MetricError::LengthMismatch { truth: 1, pred: 2 })
        );
        assert_eq!(mae(&[], &[]), Err(MetricError::Empty));
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..200)) {
            let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = rmse(&t, &p).unwrap();
            let m = mae(&t, &p).unwrap();
            prop_assert!((r - brute_rmse(&t, &p)).abs() <= 1e-12 * r.max(1.0));
            prop_assert!(m <= r + 1e-12);
        }

        #[test]
        fn scale_equivariance(pairs in proptest::collection::vec((0f64..100.0, 0f64..100.0), 1..50), c in 0.01f64..100.0) {
            let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let ts: Vec<f64> = t.iter().map(|x| x * c).collect();
            let ps: Vec<f64> = p.iter().map(|x| x * c).collect();
            prop_assert!((rmse(&ts, &ps).unwrap() - c * rmse(&t, &p).unwrap()).abs() <= 1e-9 * c.max(1.0) * 100.0);
            prop_assert!((mae(&ts, &ps).unwrap() - c * mae(&t, &p).unwrap()).abs() <= 1e-9 * c.max(1.0) * 100.0);
        }
    }

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2019, 8, d).unwrap()
    }

    /// Two stations whose every weekday repeats the same profile.
    fn periodic_repo() -> InformationRepository {
        let day: Vec<u32> = (0..108).map(|b| 5 + (b * 13 % 29) as u32).collect();
        let mut flows = FlowStore::new();
        for s in ["A", "B"] {
            for dir in FlowDirection::ALL {
                // Monday 5th .. Friday 16th.
                flows.insert(FlowSeries::from_days(s, dir, date(5), &vec![day.clone(); 12]));
            }
        }
        build_repository(flows, vec![], AdjacencyMatrix::line(["A", "B"]).unwrap())
            .unwrap()
            .0
    }

    fn split() -> Split {
        Split {
            train: DateRange::new(date(5), date(9)),
            test: DateRange::new(date(12), date(16)),
        }
    }

    #[test]
    fn tasks_cover_each_bin_once() {
        let repo = periodic_repo();
        let set = generate_tasks(repo.flows(), DateRange::new(date(12), date(12)), 12, 6).unwrap();
        assert_eq!(set.tasks.len(), 4 * 18);
        assert_eq!(set.skipped, 0);
        let mut seen = std::collections::BTreeSet::new();
        for t in set.tasks.iter().filter(|t| t.task.station_id == "A" && t.task.direction == FlowDirection::Inflow) {
            for b in t.task.target_bins() {
                assert!(seen.insert(b));
            }
        }
        assert_eq!(seen.len(), 108);
        // The first day of data has no history for its early windows.
        let first = generate_tasks(repo.flows(), DateRange::new(date(5), date(5)), 12, 6).unwrap();
        assert_eq!(first.skipped, 4 * 2);
        // Horizon 5 leaves the last 3 bins of the day uncovered.
        assert_eq!(generate_tasks(repo.flows(), DateRange::new(date(12), date(12)), 1, 5).unwrap().tasks.len(), 4 * 21);
    }

    #[test]
    fn seasonal_naive_is_exact_on_periodic_data() {
        let repo = periodic_repo();
        let mut spec = ExperimentSpec::new(split());
        spec.models = vec![ModelKind::SeasonalNaive];
        spec.focus_filter = false;
        let out = run_experiment(&spec, &repo, &MockBackend::default()).unwrap();
        let m = &out.headline.models[0];
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.n, out.headline.n_tasks * 6);
        assert!(out.secondary.is_none());
        assert!(out.p1.is_none());
    }

    #[test]
    fn mock_p1_and_p2_agree() {
        let repo = periodic_repo();
        let mut spec = ExperimentSpec::new(split());
        spec.models = vec![ModelKind::SeasonalNaive, ModelKind::P1, ModelKind::P2];
        spec.focus_filter = false;
        let out = run_experiment(&spec, &repo, &MockBackend::default()).unwrap();
        let p1 = out.headline.model(ModelKind::P1).unwrap();
        let p2 = out.headline.model(ModelKind::P2).unwrap();
        let sn = out.headline.model(ModelKind::SeasonalNaive).unwrap();
        assert_eq!((p1.rmse, p1.mae, p1.n), (p2.rmse, p2.mae, p2.n));
        assert_eq!(p1.residuals, sn.residuals);
        let stage2 = out.p2.as_ref().unwrap();
        assert_eq!(stage2.selected.parent_id.as_deref(), Some(out.p1.as_ref().unwrap().selected.template_id.as_str()));
        assert_eq!(out.replies["P1"].len(), out.headline.n_tasks);
    }

    #[test]
    fn invalid_specs() {
        let repo = periodic_repo();
        let mut spec = ExperimentSpec::new(Split {
            train: DateRange::new(date(5), date(12)),
            test: DateRange::new(date(12), date(16)),
        });
        assert!(matches!(run_experiment(&spec, &repo, &MockBackend::default()), Err(EvalError::Spec(_))));
        spec.split = split();
        spec.models.clear();
        assert!(matches!(run_experiment(&spec, &repo, &MockBackend::default()), Err(EvalError::NoModels)));
    }

    /// Refuses every prompt whose forecast starts on or after `from`.
    struct FailsFrom(NaiveDate, MockBackend);

    impl ForecastBackend for FailsFrom {
        fn backend_id(&self) -> String {
            "fails-from".into()
        }
        fn max_in_flight(&self) -> usize {
            2
        }
        fn forecast(
            &self,
            p: &crate::prompt::RenderedPrompt,
        ) -> Result<crate::backend::ForecastResult, crate::backend::BackendError> {
            if p.task.first_target().service_date >= self.0 {
                return Err(crate::backend::BackendError::Injected(p.template_id.clone()));
            }
            self.1.forecast(p)
        }
    }

    #[test]
    fn failing_model_is_incomplete() {
        let repo = periodic_repo();
        let mut spec = ExperimentSpec::new(split());
        spec.models = vec![ModelKind::SeasonalNaive, ModelKind::P1];
        spec.focus_filter = false;
        let out = run_experiment(&spec, &repo, &FailsFrom(date(12), MockBackend::default())).unwrap();
        assert!(out.headline.any_incomplete());
        let p1 = out.headline.model(ModelKind::P1).unwrap();
        assert!(p1.incomplete);
        assert_eq!(p1.n_failures, out.headline.n_tasks);
        assert!(p1.rmse.is_nan());
        assert!(!out.headline.model(ModelKind::SeasonalNaive).unwrap().incomplete);
    }

    #[test]
    fn literature_rows_are_byte_exact() {
        let (m, r, a) = LITERATURE_TABLE[6];
        assert_eq!(literature_row(m, r, a), "P2 | 11.75 | 8.61");
        assert_eq!(literature_row("ARIMA", 17.52, 12.5), "ARIMA | 17.52 | 12.5");
        assert!(render_literature_table().contains("| P2 | 11.75 | 8.61 |\n"));
        assert!(render_literature_table().contains("not reproduced"));
    }

    fn one_model_report() -> ExperimentReport {
        let repo = periodic_repo();
        let mut spec = ExperimentSpec::new(split());
        spec.models = vec![ModelKind::HistoricalAverage];
        spec.focus_filter = false;
        run_experiment(&spec, &repo, &MockBackend::default()).unwrap().headline
    }

    #[test]
    fn plot_data_shape_and_round_trip() {
        let report = one_model_report();
        let table = emit_plot_data(&report, "A", FlowDirection::Outflow, date(13)).unwrap();
        assert_eq!(table.rows.len(), 108);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time,truth,HistoricalAverage\n2019-08-13 06:00,"));
        assert!(text.lines().all(|l| l.split(',').count() == 3));
        let back = PlotTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, table);
        // Loaded values reproduce the report residuals.
        for r in report.models[0]
            .residuals
            .iter()
            .filter(|r| r.station_id == "A" && r.direction == FlowDirection::Outflow && r.date == date(13))
        {
            for (k, bin) in r.bins.iter().enumerate() {
                let row = back.rows.iter().find(|row| row.time.bin_index == *bin).unwrap();
                assert_eq!(row.truth, r.truth[k]);
                assert_eq!(row.preds[0], Some(r.pred[k]));
            }
        }
    }

    #[test]
    fn plot_data_errors() {
        let report = one_model_report();
        assert!(matches!(
            emit_plot_data(&report, "Z", FlowDirection::Outflow, date(13)),
            Err(EvalError::UnknownPlotTarget { .. })
        ));
        let empty = ExperimentReport {
            population: Population::Full,
            n_tasks: 0,
            models: vec![],
        };
        let err = emit_plot_data(&empty, "A", FlowDirection::Outflow, date(13)).unwrap_err();
        assert_eq!(err.to_string(), "no models in report");
    }

    #[test]
    fn report_serialises_nan_as_null() {
        let mut report = one_model_report();
        report.models[0].rmse = f64::NAN;
        let json = serde_json::to_string(&report).unwrap();
        let back: ExperimentReport = serde_json::from_str(&json).unwrap();
        assert!(back.models[0].rmse.is_nan());
        assert!(report.render_markdown().contains("| n/a |"));
    }
}
