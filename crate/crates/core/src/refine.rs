//! Template refinement: reasoning-step composition, structural screening,
//! validation scoring and selection.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ForecastBackend, ForecastTask};
use crate::eval::{ErrorSums, LabeledTask};
use crate::prompt::{
    all_dimension_subsets, dimensions_code, render, CotDimension, CotKind, DataBlock, DetailLevel,
    InformationRepository, PromptTemplate, Structure, OUTPUT_CONTRACT,
};

pub const DEFAULT_UNRELIABLE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefineError {
    #[error("nothing to nest: a nested structure needs at least one reasoning dimension")]
    NothingToNest,
    #[error("empty library")]
    EmptyLibrary,
    #[error("empty library after screening")]
    EmptyAfterScreening(Vec<ScreenDiagnostic>),
    #[error("no reliable template scores")]
    NoReliableScores,
    #[error("empty refinement axis: {0}")]
    EmptyAxis(&'static str),
}

/// Adds reasoning steps to `template`, returning a new template. The input is
/// not modified.
pub fn refine(
    template: &PromptTemplate,
    dimensions: &[CotDimension],
    structure: Structure,
    detail_level: DetailLevel,
) -> Result<PromptTemplate, RefineError> {
    if dimensions.is_empty() && structure == Structure::Nested {
        return Err(RefineError::NothingToNest);
    }
    let mut dims: Vec<CotDimension> = Vec::new();
    for d in dimensions {
        if !dims.iter().any(|x| x.kind == d.kind) {
            dims.push(d.clone());
        }
    }
    dims.sort_by_key(|d| d.kind);
    let kinds: BTreeSet<CotKind> = dims.iter().map(|d| d.kind).collect();
    Ok(PromptTemplate {
        template_id: format!(
            "{}/cot-{}-{}-{}",
            template.template_id,
            dimensions_code(&kinds),
            structure.code(),
            detail_level.code()
        ),
        sections: template.sections.clone(),
        cot_dimensions: dims,
        structure,
        detail_level,
        history_days: template.history_days,
        token_budget: template.token_budget,
        parent_id: Some(template.template_id.clone()),
    })
}

/// The options a base template is refined over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementAxes {
    pub cot_subsets: Vec<BTreeSet<CotKind>>,
    pub structures: Vec<Structure>,
    pub detail_levels: Vec<DetailLevel>,
}

impl Default for RefinementAxes {
    fn default() -> Self {
        Self {
            cot_subsets: all_dimension_subsets().into_iter().filter(|s| !s.is_empty()).collect(),
            structures: Structure::ALL.to_vec(),
            detail_levels: DetailLevel::ALL.to_vec(),
        }
    }
}

/// Every refinement of `base` over `axes`, in axis order.
pub fn refinement_candidates(base: &PromptTemplate, axes: &RefinementAxes) -> Result<Vec<PromptTemplate>, RefineError> {
    if axes.cot_subsets.is_empty() {
        return Err(RefineError::EmptyAxis("cot_subsets"));
    }
    if axes.structures.is_empty() {
        return Err(RefineError::EmptyAxis("structures"));
    }
    if axes.detail_levels.is_empty() {
        return Err(RefineError::EmptyAxis("detail_levels"));
    }
    let mut out = Vec::new();
    for subset in &axes.cot_subsets {
        let dims: Vec<CotDimension> = subset.iter().map(|k| CotDimension::standard(*k)).collect();
        for &structure in &axes.structures {
            for &detail in &axes.detail_levels {
                match refine(base, &dims, structure, detail) {
                    Ok(t) => out.push(t),
                    Err(RefineError::NothingToNest) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenDiagnostic {
    pub template_id: String,
    pub reason: String,
}

/// Structural checks applied to each template.
#[derive(Debug, Clone)]
pub struct ScreenRules {
    /// Task every template is probe-rendered against.
    pub probe: ForecastTask,
}

#[derive(Debug, Clone)]
pub struct Screened {
    pub retained: Vec<PromptTemplate>,
    pub diagnostics: Vec<ScreenDiagnostic>,
}

/// Keeps templates that have the required sections, a unique id, render
/// within budget on the probe task, and carry a data block that parses back
/// exactly. Order is preserved.
pub fn screen(
    library: &[PromptTemplate],
    rules: &ScreenRules,
    repo: &InformationRepository,
) -> Result<Screened, RefineError> {
    if library.is_empty() {
        return Err(RefineError::EmptyLibrary);
    }
    let mut seen = HashSet::new();
    let mut retained = Vec::new();
    let mut diagnostics = Vec::new();
    for template in library {
        match check(template, rules, repo, &mut seen) {
            Ok(()) => retained.push(template.clone()),
            Err(reason) => {
                log::debug!("screened out {}: {reason}", template.template_id);
                diagnostics.push(ScreenDiagnostic {
                    template_id: template.template_id.clone(),
                    reason,
                })
            }
        }
    }
    if retained.is_empty() {
        return Err(RefineError::EmptyAfterScreening(diagnostics));
    }
    Ok(Screened { retained, diagnostics })
}

fn check(
    template: &PromptTemplate,
    rules: &ScreenRules,
    repo: &InformationRepository,
    seen: &mut HashSet<String>,
) -> Result<(), String> {
    let missing = template.missing_sections();
    if !missing.is_empty() {
        let names: Vec<String> = missing.iter().map(ToString::to_string).collect();
        return Err(format!("missing required section(s): {}", names.join(", ")));
    }
    if seen.contains(&template.template_id) {
        return Err("duplicate template id".into());
    }
    let prompt = render(template, repo, &rules.probe).map_err(|e| format!("probe render failed: {e}"))?;
    match DataBlock::extract(&prompt.text) {
        Ok(block) if block == prompt.data_block => {}
        Ok(_) => return Err("data block does not round-trip".into()),
        Err(e) => return Err(e.to_string()),
    }
    if prompt.text.matches(OUTPUT_CONTRACT).count() != 1 {
        return Err("output contract must appear exactly once".into());
    }
    seen.insert(template.template_id.clone());
    Ok(())
}

/// Validation accuracy of one template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub template_id: String,
    /// NaN when every task failed.
    #[serde(with = "crate::eval::nan_as_null")]
    pub rmse: f64,
    #[serde(with = "crate::eval::nan_as_null")]
    pub mae: f64,
    pub n_tasks: usize,
    pub n_failures: usize,
    pub reliable: bool,
}

/// Runs `f` over `items` with at most `limit` in flight; output order
/// follows input order.
pub(crate) fn bounded_map<T, R, F>(limit: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match rayon::ThreadPoolBuilder::new().num_threads(limit.max(1)).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running sequentially");
            items.iter().map(f).collect()
        }
    }
}

/// Per-template RMSE/MAE over `tasks`. Failed calls are excluded from the
/// metrics and counted; a failure share above `unreliable_threshold` marks
/// the score unreliable.
pub fn score_templates(
    templates: &[PromptTemplate],
    tasks: &[LabeledTask],
    repo: &InformationRepository,
    backend: &dyn ForecastBackend,
    unreliable_threshold: f64,
) -> Vec<TemplateScore> {
    let pairs: Vec<(usize, usize)> = (0..templates.len())
        .flat_map(|t| (0..tasks.len()).map(move |k| (t, k)))
        .collect();
    let outcomes = bounded_map(backend.max_in_flight(), &pairs, |&(t, k)| {
        let labeled = &tasks[k];
        render(&templates[t], repo, &labeled.task)
            .map_err(|e| e.to_string())
            .and_then(|p| backend.forecast(&p).map_err(|e| e.to_string()))
            .map(|r| r.predictions().to_vec())
    });
    let mut sums = vec![ErrorSums::default(); templates.len()];
    let mut failures = vec![0usize; templates.len()];
    for (&(t, k), outcome) in pairs.iter().zip(outcomes) {
        match outcome {
            Ok(pred) => {
                for (truth, p) in tasks[k].truth.iter().zip(pred) {
                    sums[t].add(f64::from(*truth), f64::from(p));
                }
            }
            Err(e) => {
                log::debug!("{} failed on {}: {e}", templates[t].template_id, tasks[k].task.task_id);
                failures[t] += 1;
            }
        }
    }
    templates
        .iter()
        .enumerate()
        .map(|(t, template)| {
            let n_tasks = tasks.len();
            let share = if n_tasks == 0 { 1.0 } else { failures[t] as f64 / n_tasks as f64 };
            TemplateScore {
                template_id: template.template_id.clone(),
                rmse: sums[t].rmse(),
                mae: sums[t].mae(),
                n_tasks,
                n_failures: failures[t],
                reliable: n_tasks > 0 && share <= unreliable_threshold && sums[t].n > 0,
            }
        })
        .collect()
}

/// Lowest RMSE among reliable scores; ties go to lower MAE, then to the
/// lexicographically smaller id.
pub fn select_best(scores: &[TemplateScore]) -> Result<String, RefineError> {
    scores
        .iter()
        .filter(|s| s.reliable && s.rmse.is_finite() && s.mae.is_finite())
        .min_by(|a, b| {
            a.rmse
                .total_cmp(&b.rmse)
                .then(a.mae.total_cmp(&b.mae))
                .then_with(|| a.template_id.cmp(&b.template_id))
        })
        .map(|s| s.template_id.clone())
        .ok_or(RefineError::NoReliableScores)
}

/// Scores as CSV: `template_id,rmse,mae,n_tasks,n_failures`.
pub fn write_scores_csv<W: Write>(scores: &[TemplateScore], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["template_id", "rmse", "mae", "n_tasks", "n_failures"])?;
    for s in scores {
        w.write_record([
            s.template_id.clone(),
            s.rmse.to_string(),
            s.mae.to_string(),
            s.n_tasks.to_string(),
            s.n_failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, ForecastResult, MockBackend, MockConfig};
    use crate::bins::TimeBin;
    use crate::ingest::{FlowDirection, FlowSeries, FlowStore};
    use crate::prompt::{build_repository, generate_template_library, RenderedPrompt, SectionKind, TemplateAxes};
    use crate::topology::AdjacencyMatrix;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2019, 9, d).unwrap()
    }

    fn base() -> PromptTemplate {
        generate_template_library(&TemplateAxes {
            cot_subsets: vec![BTreeSet::new()],
            structures: vec![Structure::Parallel],
            detail_levels: vec![DetailLevel::Standard],
            ..TemplateAxes::default()
        })
        .unwrap()
        .remove(0)
    }

    /// Two weekdays of a repeating profile so the mock returns the truth.
    fn fixture() -> (InformationRepository, Vec<LabeledTask>) {
        let day: Vec<u32> = (0..108).map(|b| 10 + (b % 17) as u32).collect();
        let mut flows = FlowStore::new();
        flows.insert(FlowSeries::from_days("A", FlowDirection::Inflow, date(16), &vec![day.clone(); 3]));
        flows.insert(FlowSeries::from_days("A", FlowDirection::Outflow, date(16), &vec![day.clone(); 3]));
        flows.insert(FlowSeries::from_days("B", FlowDirection::Inflow, date(16), &vec![day.clone(); 3]));
        flows.insert(FlowSeries::from_days("B", FlowDirection::Outflow, date(16), &vec![day.clone(); 3]));
        let adj = AdjacencyMatrix::line(["A", "B"]).unwrap();
        let (repo, _) = build_repository(flows, vec![], adj).unwrap();
        let tasks = (0..4u16)
            .map(|k| {
                let first = TimeBin::new(date(18), 20 + 6 * k).unwrap();
                let task = ForecastTask::new(
                    ForecastTask::standard_id("A", FlowDirection::Inflow, first),
                    "A",
                    FlowDirection::Inflow,
                    first.pred(),
                    12,
                    6,
                )
                .unwrap();
                let truth = (0..6).map(|i| day[usize::from(first.bin_index) + i]).collect();
                LabeledTask { task, truth }
            })
            .collect();
        (repo, tasks)
    }

    fn probe(tasks: &[LabeledTask]) -> ScreenRules {
        ScreenRules {
            probe: tasks[0].task.clone(),
        }
    }

    #[test]
    fn refine_single_dimension() {
        let (repo, tasks) = fixture();
        let t = base();
        let r = refine(&t, &[CotDimension::standard(CotKind::Temporal)], Structure::Parallel, DetailLevel::Standard).unwrap();
        assert_eq!(r.template_id, format!("{}/cot-t-parallel-standard", t.template_id));
        assert_eq!(r.parent_id.as_deref(), Some(t.template_id.as_str()));
        let text = render(&r, &repo, &tasks[0].task).unwrap().text;
        let steps: Vec<usize> = text.match_indices("\nStep ").map(|(i, _)| i).collect();
        assert_eq!(steps.len(), 1);
        assert!(steps[0] < text.find("## Task").unwrap());
    }

    #[test]
    fn refine_nested_links_conclusions() {
        let (repo, tasks) = fixture();
        let dims: Vec<_> = CotKind::ALL.iter().rev().map(|k| CotDimension::standard(*k)).collect();
        let r = refine(&base(), &dims, Structure::Nested, DetailLevel::Standard).unwrap();
        assert_eq!(r.cot_kinds().len(), 3);
        let text = render(&r, &repo, &tasks[0].task).unwrap().text;
        let lines: Vec<&str> = text.lines().filter(|l| l.starts_with("Step ")).collect();
        assert_eq!(lines.len(), 3);
        for (i, l) in lines.iter().enumerate().skip(1) {
            assert!(l.contains(&format!("[C{i}]")), "{l}");
        }
    }

    #[test]
    fn refine_is_pure_and_checks_nesting() {
        let t = base();
        let before = t.clone();
        let dims = [CotDimension::standard(CotKind::SpatialSpread)];
        let a = refine(&t, &dims, Structure::Parallel, DetailLevel::Brief).unwrap();
        let b = refine(&t, &dims, Structure::Parallel, DetailLevel::Brief).unwrap();
        assert_eq!(a, b);
        assert_eq!(t, before);
        assert_eq!(refine(&t, &[], Structure::Nested, DetailLevel::Brief), Err(RefineError::NothingToNest));
    }

    #[test]
    fn candidate_count() {
        assert_eq!(refinement_candidates(&base(), &RefinementAxes::default()).unwrap().len(), 42);
    }

    #[test]
    fn screening() {
        let (repo, tasks) = fixture();
        let rules = probe(&tasks);
        let one = vec![base()];
        assert_eq!(screen(&one, &rules, &repo).unwrap().retained, one);

        let mut broken = base();
        broken.template_id = "broken".into();
        broken.sections.retain(|s| *s != SectionKind::OutputFormat);
        let s = screen(&[base(), broken], &rules, &repo).unwrap();
        assert_eq!(s.retained.len(), 1);
        assert_eq!(s.diagnostics[0].template_id, "broken");
        assert!(s.diagnostics[0].reason.contains("output-format"));
    }

    #[test]
    fn screening_over_budget_probe() {
        let (repo, tasks) = fixture();
        let rules = probe(&tasks);
        let mut library = generate_template_library(&TemplateAxes::default()).unwrap();
        let lens: Vec<usize> = library
            .iter()
            .map(|t| render(t, &repo, &rules.probe).unwrap().text.chars().count())
            .collect();
        for (i, t) in library.iter_mut().enumerate().take(3) {
            t.token_budget = 100.min(lens[i] - 1);
        }
        let s = screen(&library, &rules, &repo).unwrap();
        assert_eq!(s.retained.len(), 45);
        assert_eq!(s.diagnostics.len(), 3);
        let again = screen(&s.retained, &rules, &repo).unwrap();
        assert_eq!(again.retained, s.retained);
    }

    #[test]
    fn screening_everything_out() {
        let (repo, tasks) = fixture();
        let mut t = base();
        t.token_budget = 10;
        assert!(matches!(
            screen(&[t], &probe(&tasks), &repo),
            Err(RefineError::EmptyAfterScreening(_))
        ));
        assert_eq!(screen(&[], &probe(&tasks), &repo).unwrap_err(), RefineError::EmptyLibrary);
    }

    #[test]
    fn perfect_and_offset_oracles() {
        let (repo, tasks) = fixture();
        let perfect = MockBackend::new(MockConfig::default(), 2);
        let s = score_templates(&[base()], &tasks, &repo, &perfect, 0.5);
        assert_eq!((s[0].rmse, s[0].mae, s[0].n_tasks), (0.0, 0.0, 4));
        let offset = MockBackend::new(
            MockConfig {
                additive: 2,
                ..MockConfig::default()
            },
            3,
        );
        let s = score_templates(&[base()], &tasks, &repo, &offset, 0.5);
        assert!((s[0].rmse - 2.0).abs() < 1e-12 && (s[0].mae - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fault_injection_flags_template() {
        let (repo, tasks) = fixture();
        let a = base();
        let mut b = base();
        b.template_id = "B".into();
        let backend = MockBackend::new(
            MockConfig {
                fail_template_ids: vec!["B".into()],
                ..MockConfig::default()
            },
            4,
        );
        let scores = score_templates(&[a.clone(), b], &tasks, &repo, &backend, 0.5);
        assert!(scores[0].reliable);
        assert!(!scores[1].reliable);
        assert_eq!(scores[1].n_failures, 4);
        assert!(scores[1].rmse.is_nan());
        assert_eq!(select_best(&scores).unwrap(), a.template_id);
    }

    /// Fails every other call for one template so the threshold is exercised.
    struct Flaky(MockBackend, std::sync::atomic::AtomicUsize);

    impl ForecastBackend for Flaky {
        fn backend_id(&self) -> String {
            "flaky".into()
        }
        fn max_in_flight(&self) -> usize {
            1
        }
        fn forecast(&self, p: &RenderedPrompt) -> Result<ForecastResult, BackendError> {
            if self.1.fetch_add(1, std::sync::atomic::Ordering::SeqCst).is_multiple_of(2) {
                return Err(BackendError::Injected(p.template_id.clone()));
            }
            self.0.forecast(p)
        }
    }

    #[test]
    fn half_failures_stay_reliable() {
        let (repo, tasks) = fixture();
        let flaky = Flaky(MockBackend::default(), Default::default());
        let s = score_templates(&[base()], &tasks, &repo, &flaky, 0.5);
        assert_eq!(s[0].n_failures, 2);
        assert!(s[0].reliable);
    }

    #[test]
    fn scoring_is_reproducible() {
        let (repo, tasks) = fixture();
        let lib = generate_template_library(&TemplateAxes::default()).unwrap();
        let backend = MockBackend::new(MockConfig { additive: 1, ..MockConfig::default() }, 8);
        let a = score_templates(&lib, &tasks, &repo, &backend, 0.5);
        let b = score_templates(&lib, &tasks, &repo, &MockBackend::new(MockConfig { additive: 1, ..MockConfig::default() }, 1), 0.5);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_scores_csv(&a, &mut ca).unwrap();
        write_scores_csv(&b, &mut cb).unwrap();
        assert_eq!(ca, cb);
        assert!(String::from_utf8(ca).unwrap().starts_with("template_id,rmse,mae,n_tasks,n_failures\n"));
    }

    fn score(id: &str, rmse: f64, mae: f64) -> TemplateScore {
        TemplateScore {
            template_id: id.into(),
            rmse,
            mae,
            n_tasks: 1,
            n_failures: 0,
            reliable: true,
        }
    }

    #[test]
    fn selection_order() {
        assert_eq!(select_best(&[score("A", 1.0, 1.0)]).unwrap(), "A");
        assert_eq!(select_best(&[score("A", 2.0, 0.1), score("B", 1.5, 9.0)]).unwrap(), "B");
        assert_eq!(select_best(&[score("t2", 1.0, 1.0), score("t1", 1.0, 1.0)]).unwrap(), "t1");
        assert_eq!(select_best(&[score("x", 1.0, 2.0), score("a", 1.0, 3.0)]).unwrap(), "x");
        let mut bad = score("A", 1.0, 1.0);
        bad.reliable = false;
        assert_eq!(select_best(&[bad]), Err(RefineError::NoReliableScores));
        assert_eq!(select_best(&[]), Err(RefineError::NoReliableScores));
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant(
            values in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..20),
            c in 0.001f64..1000.0,
        ) {
            let scores: Vec<_> = values.iter().enumerate().map(|(i, (r, m))| score(&format!("t{i:02}"), *r, *m)).collect();
            let scaled: Vec<_> = scores.iter().map(|s| TemplateScore { rmse: s.rmse * c, ..s.clone() }).collect();
            prop_assert_eq!(select_best(&scores).unwrap(), select_best(&scaled).unwrap());
        }
    }
}
