use std::collections::BTreeMap;

use serde::Serialize;

use super::data_block::{comparable_dates, day_slice, ComparableDay, DataBlock, Observation};
use super::repository::InformationRepository;
use super::{CotDimension, DetailLevel, PromptError, PromptTemplate, SectionKind, Structure};
use crate::backend::ForecastTask;
use crate::bins::{DayType, TimeBin, BIN_MINUTES};
use crate::ingest::{FlowDirection, FlowSeries};
use crate::topology::DelayEvent;

/// The reply contract, stated once in every prompt.
pub const OUTPUT_CONTRACT: &str =
    "Reply with a single JSON object of the form {\"task_id\": \"<task id>\", \"predictions\": [<integers>]} and nothing else.";

const OMITTED: &str = "(omitted to fit the length budget)";
const CUT: &str = " [truncated]";

/// A prompt ready to send, with the numbers it carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub text: String,
    pub data_block: DataBlock,
    pub task: ForecastTask,
}

/// Replaces `{name}` placeholders from `values`. Unknown names are an error.
pub fn fill_placeholders(spec: &str, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(spec.len());
    let mut rest = spec;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            out.push_str(&rest[open..]);
            return Ok(out);
        };
        let name = &after[..close];
        match values.get(name) {
            Some(v) => out.push_str(v),
            None => return Err(PromptError::UnknownPlaceholder(name.to_string())),
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders `template` for `task`. Pure: identical inputs give identical text.
pub fn render(
    template: &PromptTemplate,
    repo: &InformationRepository,
    task: &ForecastTask,
) -> Result<RenderedPrompt, PromptError> {
    if let Some(section) = template.missing_sections().into_iter().next() {
        return Err(PromptError::MissingSection {
            template_id: template.template_id.clone(),
            section,
        });
    }
    if template.history_days == 0 || template.token_budget == 0 {
        return Err(PromptError::InvalidTemplate {
            template_id: template.template_id.clone(),
            reason: "history_days and token_budget must be positive".into(),
        });
    }
    let series = repo.series(&task.station_id, task.direction)?;
    let ctx = Context::gather(template, repo, series, task)?;

    let mut bodies: BTreeMap<SectionKind, String> = SectionKind::ALL
        .into_iter()
        .map(|kind| (kind, ctx.section_body(kind, template.detail_level)))
        .collect();
    let reasoning = ctx.reasoning_block(template)?;

    let mut text = assemble(template, &bodies, &reasoning);
    let budget = template.token_budget;
    if char_len(&text) > budget && template.sections.contains(&SectionKind::AdjacencyContext) {
        bodies.insert(SectionKind::AdjacencyContext, OMITTED.to_string());
        text = assemble(template, &bodies, &reasoning);
    }
    if char_len(&text) > budget && template.sections.contains(&SectionKind::EventDescription) {
        let over = char_len(&text) - budget;
        let body = &bodies[&SectionKind::EventDescription];
        let keep = char_len(body).saturating_sub(over + CUT.len());
        let cut: String = body.chars().take(keep).collect();
        bodies.insert(SectionKind::EventDescription, format!("{cut}{CUT}"));
        text = assemble(template, &bodies, &reasoning);
    }
    let len = char_len(&text);
    if len > budget {
        return Err(PromptError::OverBudget { len, budget });
    }
    Ok(RenderedPrompt {
        template_id: template.template_id.clone(),
        text,
        data_block: ctx.block,
        task: task.clone(),
    })
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

fn assemble(template: &PromptTemplate, bodies: &BTreeMap<SectionKind, String>, reasoning: &Option<String>) -> String {
    let mut parts = vec![preamble(template.detail_level)];
    for kind in &template.sections {
        if *kind == SectionKind::TaskInstruction {
            if let Some(steps) = reasoning {
                parts.push(steps.clone());
            }
        }
        parts.push(format!("{}\n{}", kind.heading(), bodies[kind]));
    }
    let mut text = parts.join("\n\n");
    text.push('\n');
    text
}

fn preamble(detail: DetailLevel) -> String {
    let mut s = String::from("You forecast metro passenger flow in 10-minute intervals.");
    if detail >= DetailLevel::Standard {
        s.push_str(" Service runs from 06:00 to 24:00 and counts are whole passengers.");
    }
    if detail >= DetailLevel::Verbose {
        s.push_str(" Delays on the line can suppress flow while trains are held and release it as a peak once service recovers.");
    }
    s
}

struct Context<'a> {
    task: &'a ForecastTask,
    block: DataBlock,
    first_target: TimeBin,
    events: Vec<(&'a DelayEvent, &'a [String])>,
    neighbors: Vec<&'a str>,
    registry_len: usize,
}

impl<'a> Context<'a> {
    fn gather(
        template: &PromptTemplate,
        repo: &'a InformationRepository,
        series: &FlowSeries,
        task: &'a ForecastTask,
    ) -> Result<Self, PromptError> {
        let history = series
            .window_ending(task.anchor, task.history_len)
            .ok_or_else(|| PromptError::HistoryUnderflow {
                task_id: task.task_id.clone(),
                needed: task.history_len,
                anchor: task.anchor.to_string(),
            })?;
        let targets = task.target_bins();
        let first_target = targets[0];
        let target_date = first_target.service_date;
        let last_bin = targets[targets.len() - 1].bin_index;
        let from_bin = first_target
            .bin_index
            .saturating_sub(u16::try_from(task.history_len).unwrap_or(u16::MAX));
        let comparable_days = comparable_dates(series, target_date, template.history_days)
            .into_iter()
            .map(|date| ComparableDay {
                date,
                day_type: DayType::of(date),
                values: day_slice(series, date, from_bin, last_bin),
            })
            .collect();
        let block = DataBlock {
            task_id: task.task_id.clone(),
            station: task.station_id.clone(),
            direction: task.direction,
            horizon: task.horizon,
            target_date,
            target_bins: targets.iter().map(|b| b.bin_index).collect(),
            history: history
                .iter()
                .map(|(b, v)| Observation {
                    date: b.service_date,
                    bin: b.bin_index,
                    value: *v,
                })
                .collect(),
            comparable_days,
        };

        let span_start = match history.first() {
            Some((b, _)) if b.service_date == target_date => b.start_minute(),
            _ => TimeBin::new(target_date, 0).expect("bin 0").start_minute(),
        };
        let span_end = targets[targets.len() - 1].start_minute() + BIN_MINUTES;
        let events = repo.events_touching(&task.station_id, target_date, span_start, span_end);
        let neighbors = repo
            .adjacency()
            .neighbors(&task.station_id)
            .map_err(|_| PromptError::UnknownStation(task.station_id.clone()))?;
        Ok(Self {
            task,
            block,
            first_target,
            events,
            neighbors,
            registry_len: repo.station_registry().len(),
        })
    }

    fn direction_phrase(&self) -> &'static str {
        match self.task.direction {
            FlowDirection::Inflow => "passenger inflow (entries)",
            FlowDirection::Outflow => "passenger outflow (exits)",
        }
    }

    fn section_body(&self, kind: SectionKind, detail: DetailLevel) -> String {
        match kind {
            SectionKind::EventDescription => self.event_body(detail),
            SectionKind::HistoricalFlow => self.history_body(detail),
            SectionKind::AdjacencyContext => self.adjacency_body(detail),
            SectionKind::TaskInstruction => self.task_body(detail),
            SectionKind::OutputFormat => self.output_body(detail),
        }
    }

    fn event_body(&self, detail: DetailLevel) -> String {
        if self.events.is_empty() {
            let mut s = format!(
                "No active delay is reported at {} around {} on {}.",
                self.task.station_id,
                self.first_target.clock_label(),
                self.first_target.service_date
            );
            if detail >= DetailLevel::Standard {
                s.push_str(" Operation is assumed to follow the normal timetable.");
            }
            return s;
        }
        let mut lines = Vec::new();
        for (event, scope) in &self.events {
            let mut s = format!(
                "{} on {} on {} from {} to {}, {} direction, between {} and {}.",
                event.delay_type.label(),
                event.line_id,
                event.date,
                event.start_time.format("%H:%M"),
                event.end_time.format("%H:%M"),
                event.direction,
                event.interval_from,
                event.interval_to
            );
            s.push_str(&format!(" Affected stations: {}.", scope.join(", ")));
            if detail >= DetailLevel::Standard {
                s.push_str(&format!(
                    " The {} lasted {} minutes. Report: {}",
                    event.delay_type.phrase(),
                    event.duration_minutes(),
                    event.description.trim()
                ));
            }
            if detail >= DetailLevel::Verbose {
                s.push_str(&format!(
                    " {} is {} the affected interval.",
                    self.task.station_id,
                    if self.task.station_id == event.interval_from || self.task.station_id == event.interval_to {
                        "an endpoint of"
                    } else {
                        "within the reach of"
                    }
                ));
            }
            lines.push(s);
        }
        lines.join("\n")
    }

    fn history_body(&self, detail: DetailLevel) -> String {
        let recent = self
            .block
            .history
            .iter()
            .map(|o| format!("{} {}", clock(o.bin), o.value))
            .collect::<Vec<_>>()
            .join(", ");
        let mut s = format!(
            "Recent {} at {} per 10-minute interval: {}.",
            self.direction_phrase(),
            self.task.station_id,
            recent
        );
        if self.block.comparable_days.is_empty() {
            s.push_str(" No comparable earlier day is available.");
        }
        for day in &self.block.comparable_days {
            let vals = day
                .values
                .iter()
                .map(|(b, v)| format!("{} {}", clock(*b), v))
                .collect::<Vec<_>>()
                .join(", ");
            s.push_str(&format!("\nSame period on {} ({}): {}.", day.date, day.day_type.as_str(), vals));
        }
        if detail >= DetailLevel::Standard {
            s.push_str(&format!(
                "\nComparable days are the most recent earlier {}s at the same station.",
                DayType::of(self.block.target_date).as_str()
            ));
        }
        if detail >= DetailLevel::Verbose {
            let total: u64 = self.block.history.iter().map(|o| u64::from(o.value)).sum();
            s.push_str(&format!(
                " The recent window holds {} passengers over {} intervals.",
                total,
                self.block.history.len()
            ));
        }
        s
    }

    fn adjacency_body(&self, detail: DetailLevel) -> String {
        let mut s = if self.neighbors.is_empty() {
            format!("{} has no directly connected stations.", self.task.station_id)
        } else {
            format!(
                "{} is directly connected to {}.",
                self.task.station_id,
                self.neighbors.join(", ")
            )
        };
        if detail >= DetailLevel::Standard {
            s.push_str(&format!(" The network has {} stations.", self.registry_len));
        }
        if detail >= DetailLevel::Verbose {
            s.push_str(" A disruption at a neighbor can shift passengers onto or away from this station.");
        }
        s
    }

    fn task_body(&self, detail: DetailLevel) -> String {
        let mut s = format!(
            "Forecast the {} at {} for the next {} 10-minute intervals, starting at {} on {}.",
            self.direction_phrase(),
            self.task.station_id,
            self.task.horizon,
            self.first_target.clock_label(),
            self.first_target.service_date
        );
        if detail >= DetailLevel::Standard {
            s.push_str(" Use the recent values and the comparable days.");
        }
        if detail >= DetailLevel::Verbose {
            s.push_str(" Account for any delay-related drop and the recovery peak that may follow it.");
        }
        s.push_str("\nThe numbers used in this prompt, in machine-readable form:\n");
        s.push_str(&self.block.embed());
        s
    }

    fn output_body(&self, detail: DetailLevel) -> String {
        let mut s = format!(
            "{OUTPUT_CONTRACT}\nUse task_id \"{}\" and exactly {} non-negative integers.",
            self.task.task_id, self.task.horizon
        );
        if detail >= DetailLevel::Standard {
            s.push_str(" Write plain integers without separators.");
        }
        if detail >= DetailLevel::Verbose {
            s.push_str(" Do not add commentary outside the JSON object.");
        }
        s
    }

    fn placeholders(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("window_start", self.first_target.clock_label());
        m.insert("date", self.first_target.service_date.to_string());
        m.insert("day_type", DayType::of(self.block.target_date).as_str().to_string());
        m.insert("station", self.task.station_id.clone());
        m.insert("direction_phrase", self.direction_phrase().to_string());
        let tail: Vec<String> = self
            .block
            .history
            .iter()
            .rev()
            .take(3)
            .rev()
            .map(|o| o.value.to_string())
            .collect();
        m.insert("recent_summary", format!("latest values {}", tail.join(", ")));
        m.insert(
            "comparable_summary",
            if self.block.comparable_days.is_empty() {
                "none available".to_string()
            } else {
                self.block
                    .comparable_days
                    .iter()
                    .map(|d| d.date.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            },
        );
        m.insert(
            "event_summary",
            if self.events.is_empty() {
                "no delay is reported for this window".to_string()
            } else {
                self.events
                    .iter()
                    .map(|(e, _)| {
                        format!(
                            "a {} between {} and {} from {} to {}",
                            e.delay_type.phrase(),
                            e.interval_from,
                            e.interval_to,
                            e.start_time.format("%H:%M"),
                            e.end_time.format("%H:%M")
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("; ")
            },
        );
        let mut scope: Vec<&str> = self.events.iter().flat_map(|(_, s)| s.iter().map(String::as_str)).collect();
        scope.sort_unstable();
        scope.dedup();
        m.insert(
            "scope_summary",
            if scope.is_empty() {
                "no stations are currently affected".to_string()
            } else {
                format!("affected stations are {}", scope.join(", "))
            },
        );
        m.insert(
            "neighbors",
            if self.neighbors.is_empty() {
                "no other station".to_string()
            } else {
                self.neighbors.join(", ")
            },
        );
        m
    }

    fn reasoning_block(&self, template: &PromptTemplate) -> Result<Option<String>, PromptError> {
        if template.cot_dimensions.is_empty() {
            return Ok(None);
        }
        let values = self.placeholders();
        let detail = template.detail_level;
        let mut lines = vec!["## Reasoning steps".to_string()];
        lines.push(match template.structure {
            Structure::Parallel => "Consider each factor on its own, then combine the conclusions.".to_string(),
            Structure::Nested => "Work through the steps in order; each step builds on the previous conclusion.".to_string(),
        });
        for (i, dim) in template.cot_dimensions.iter().enumerate() {
            lines.push(step_line(i + 1, dim, template.structure, detail, &values)?);
        }
        let n = template.cot_dimensions.len();
        let refs = (1..=n).map(|k| format!("[C{k}]")).collect::<Vec<_>>().join(", ");
        lines.push(format!("Combine {refs} into the forecast."));
        Ok(Some(lines.join("\n")))
    }
}

fn step_line(
    k: usize,
    dim: &CotDimension,
    structure: Structure,
    detail: DetailLevel,
    values: &BTreeMap<&'static str, String>,
) -> Result<String, PromptError> {
    let mut s = format!("Step {k} ({}): ", dim.kind.label());
    let body = fill_placeholders(&dim.step_text_spec, values)?;
    if structure == Structure::Nested && k >= 2 {
        s.push_str(&format!("Starting from conclusion [C{}], ", k - 1));
        let mut chars = body.chars();
        if let Some(first) = chars.next() {
            s.extend(first.to_lowercase());
            s.push_str(chars.as_str());
        }
    } else {
        s.push_str(&body);
    }
    if detail >= DetailLevel::Standard {
        s.push_str(" Quote the numbers you rely on.");
    }
    if detail >= DetailLevel::Verbose {
        s.push_str(" Say whether the effect grows or fades across the forecast window.");
    }
    s.push_str(&format!(" Record your conclusion as [C{k}]."));
    Ok(s)
}

fn clock(bin: u16) -> String {
    let minutes = u32::from(bin) * BIN_MINUTES + 6 * 60;
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}
