//! Run reports and their renderings.
//!
//! A report is the full event log of a run plus views derived from it: one
//! record per job with its phase timestamps, the copy audit and the model
//! lifecycle. Rendering is a pure function of the report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, EventKind};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("malformed report: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unknown report format `{0}` (expected text-gantt, svg or summary)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub step: String,
    pub model: String,
    pub service: String,
    /// `model/id` of every assigned resource, in rank order.
    pub resources: Vec<String>,
    pub status: String,
    pub exit_codes: Vec<i32>,
    pub queued: f64,
    pub scheduled: Option<f64>,
    pub inputs_staged: Option<f64>,
    pub started: Option<f64>,
    pub finished: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyRecord {
    pub token: String,
    pub plan: String,
    pub leg: u8,
    pub source: String,
    pub destination: String,
    pub kind: String,
    pub bytes: u64,
    /// Completion time.
    pub t: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    pub external: bool,
    pub resources: Vec<String>,
    pub deployed: Option<f64>,
    pub undeployed: Option<f64>,
    pub redeploys: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub token: String,
    pub kind: String,
    /// Location under the output directory, for file and directory data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub workflow: String,
    /// `completed`, `failed` or `teardown_failed`.
    pub status: String,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    #[serde(default)]
    pub errors: Vec<String>,
    pub events: Vec<Event>,
    pub jobs: Vec<JobRecord>,
    pub copies: Vec<CopyRecord>,
    pub models: Vec<ModelRecord>,
    #[serde(default)]
    pub outputs: BTreeMap<String, Vec<OutputRecord>>,
}

impl RunReport {
    /// Builds the derived views from the event log.
    pub fn from_events(
        run_id: &str,
        workflow: &str,
        status: &str,
        started_at: f64,
        mut events: Vec<Event>,
    ) -> RunReport {
        events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.seq.cmp(&b.seq)));
        let mut jobs: BTreeMap<String, JobRecord> = BTreeMap::new();
        let mut copies = Vec::new();
        let mut models: BTreeMap<String, ModelRecord> = BTreeMap::new();
        let model = |models: &mut BTreeMap<String, ModelRecord>, name: &str| {
            models
                .entry(name.to_string())
                .or_insert_with(|| ModelRecord {
                    name: name.to_string(),
                    external: false,
                    resources: Vec::new(),
                    deployed: None,
                    undeployed: None,
                    redeploys: 0,
                })
                .clone()
        };
        for e in &events {
            match &e.kind {
                EventKind::JobQueued {
                    job,
                    step,
                    model,
                    service,
                } => {
                    jobs.insert(
                        job.clone(),
                        JobRecord {
                            id: job.clone(),
                            step: step.clone(),
                            model: model.clone(),
                            service: service.clone(),
                            resources: Vec::new(),
                            status: "pending".into(),
                            exit_codes: Vec::new(),
                            queued: e.t,
                            scheduled: None,
                            inputs_staged: None,
                            started: None,
                            finished: None,
                        },
                    );
                }
                EventKind::JobScheduled { job, resources, .. } => {
                    if let Some(j) = jobs.get_mut(job) {
                        j.scheduled = Some(e.t);
                        j.status = "running".into();
                        j.resources = resources.iter().map(|r| format!("{}/{r}", j.model)).collect();
                    }
                }
                EventKind::InputsStaged { job } => {
                    if let Some(j) = jobs.get_mut(job) {
                        j.inputs_staged = Some(e.t);
                    }
                }
                EventKind::JobStarted { job } => {
                    if let Some(j) = jobs.get_mut(job) {
                        j.started = Some(e.t);
                    }
                }
                EventKind::JobFinished {
                    job,
                    status,
                    exit_codes,
                    ..
                } => {
                    if let Some(j) = jobs.get_mut(job) {
                        j.finished = Some(e.t);
                        j.status = status.clone();
                        j.exit_codes = exit_codes.clone();
                    }
                }
                EventKind::Copy {
                    token,
                    plan,
                    leg,
                    source,
                    destination,
                    kind,
                    bytes,
                    duration_s,
                } => copies.push(CopyRecord {
                    token: token.clone(),
                    plan: plan.clone(),
                    leg: *leg,
                    source: source.clone(),
                    destination: destination.clone(),
                    kind: kind.clone(),
                    bytes: *bytes,
                    t: e.t,
                    duration_s: *duration_s,
                }),
                EventKind::DeployFinished { model: m, resources } => {
                    let mut r = model(&mut models, m);
                    r.deployed = Some(e.t);
                    r.resources = resources.clone();
                    models.insert(m.clone(), r);
                }
                EventKind::ExternalAttached { model: m, resources } => {
                    let mut r = model(&mut models, m);
                    r.external = true;
                    r.deployed = Some(e.t);
                    r.resources = resources.clone();
                    models.insert(m.clone(), r);
                }
                EventKind::RedeployFinished {
                    model: m,
                    resources,
                    ..
                } => {
                    let mut r = model(&mut models, m);
                    r.redeploys += 1;
                    r.resources.extend(resources.iter().cloned());
                    models.insert(m.clone(), r);
                }
                EventKind::UndeployFinished { model: m } => {
                    let mut r = model(&mut models, m);
                    r.undeployed = Some(e.t);
                    models.insert(m.clone(), r);
                }
                _ => {}
            }
        }
        let mut jobs: Vec<JobRecord> = jobs.into_values().collect();
        jobs.sort_by(|a, b| a.queued.total_cmp(&b.queued).then_with(|| a.id.cmp(&b.id)));
        RunReport {
            run_id: run_id.to_string(),
            workflow: workflow.to_string(),
            status: status.to_string(),
            started_at,
            errors: Vec::new(),
            events,
            jobs,
            copies,
            models: models.into_values().collect(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<RunReport, ReportError> {
        Ok(serde_json::from_str(text)?)
    }

    /// `max(finished) - min(queued)` over jobs; zero without jobs.
    pub fn makespan(&self) -> f64 {
        let start = self.jobs.iter().map(|j| j.queued).reduce(f64::min);
        let end = self.jobs.iter().filter_map(|j| j.finished).reduce(f64::max);
        match (start, end) {
            (Some(s), Some(e)) if e > s => e - s,
            _ => 0.0,
        }
    }

    /// Jobs per resource lane, lanes sorted by name.
    pub fn lanes(&self) -> BTreeMap<String, Vec<&JobRecord>> {
        let mut lanes: BTreeMap<String, Vec<&JobRecord>> = BTreeMap::new();
        for j in &self.jobs {
            for r in &j.resources {
                lanes.entry(r.clone()).or_default().push(j);
            }
        }
        lanes
    }

    /// Largest number of jobs running at the same instant.
    pub fn max_concurrency(&self) -> usize {
        let mut points: Vec<(f64, i32)> = Vec::new();
        for j in &self.jobs {
            if let (Some(s), Some(f)) = (j.started, j.finished) {
                points.push((s, 1));
                points.push((f, -1));
            }
        }
        // Ends sort before starts at the same instant.
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut current = 0;
        let mut best = 0;
        for (_, d) in points {
            current += d;
            best = best.max(current);
        }
        best as usize
    }

    /// Sum of run-phase time over every (job, resource) pair of each model.
    pub fn busy_time(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for m in &self.models {
            out.insert(m.name.clone(), 0.0);
        }
        for j in &self.jobs {
            if let (Some(s), Some(f)) = (j.started, j.finished) {
                *out.entry(j.model.clone()).or_default() += (f - s) * j.resources.len() as f64;
            }
        }
        out
    }

    pub fn render(&self, format: &str) -> Result<String, ReportError> {
        match format {
            "text-gantt" => Ok(self.render_text_gantt()),
            "svg" => Ok(self.render_svg()),
            "summary" => Ok(self.render_summary()),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }

    fn origin(&self) -> f64 {
        self.jobs.iter().map(|j| j.queued).reduce(f64::min).unwrap_or(0.0)
    }

    /// One row per resource. `-` marks input staging, `#` execution; blank
    /// space between bars is time spent in the engine itself.
    pub fn render_text_gantt(&self) -> String {
        const WIDTH: usize = 60;
        let lanes = self.lanes();
        let mut out = String::new();
        let _ = writeln!(out, "{} ({}) makespan {:.3}s", self.workflow, self.status, self.makespan());
        if lanes.is_empty() {
            out.push_str("(no jobs)\n");
            return out;
        }
        let origin = self.origin();
        let span = self.makespan().max(1e-9);
        let col = |t: f64| (((t - origin) / span) * WIDTH as f64).round().clamp(0.0, WIDTH as f64) as usize;
        let name_width = lanes.keys().map(|k| k.len()).max().unwrap_or(0);
        for (lane, jobs) in &lanes {
            let mut row = vec![' '; WIDTH];
            for j in jobs {
                let staged_from = j.scheduled.unwrap_or(j.queued);
                if let Some(start) = j.started {
                    for c in row.iter_mut().take(col(start)).skip(col(staged_from)) {
                        *c = '-';
                    }
                    let end = j.finished.unwrap_or(start);
                    let (a, b) = (col(start), col(end).max(col(start) + 1).min(WIDTH));
                    for c in row.iter_mut().take(b).skip(a) {
                        *c = if j.status == "failed" { 'x' } else { '#' };
                    }
                }
            }
            let bar: String = row.into_iter().collect();
            let _ = writeln!(out, "{lane:<name_width$} |{bar}|");
        }
        out.push('\n');
        for j in &self.jobs {
            let fmt = |t: Option<f64>| t.map(|t| format!("{:.3}", t - origin)).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{} {} [{}] {} start {} end {}",
                j.id,
                j.step,
                j.resources.join(","),
                j.status,
                fmt(j.started),
                fmt(j.finished)
            );
        }
        out
    }

    pub fn render_svg(&self) -> String {
        let lanes = self.lanes();
        let origin = self.origin();
        let span = self.makespan().max(1e-9);
        let (left, width, row) = (180.0, 800.0, 24.0);
        let height = 40.0 + row * lanes.len() as f64;
        let x = |t: f64| left + (t - origin) / span * width;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="monospace" font-size="11">"#,
            left + width + 20.0,
            height
        );
        let _ = writeln!(
            out,
            r#"<text x="4" y="14">{} ({}) makespan {:.3}s</text>"#,
            escape(&self.workflow),
            escape(&self.status),
            self.makespan()
        );
        for (i, (lane, jobs)) in lanes.iter().enumerate() {
            let y = 24.0 + row * i as f64;
            let _ = writeln!(out, r#"<text x="4" y="{:.1}">{}</text>"#, y + 14.0, escape(lane));
            for j in jobs {
                let Some(start) = j.started else { continue };
                let staged_from = j.scheduled.unwrap_or(j.queued);
                let end = j.finished.unwrap_or(start);
                if start > staged_from {
                    let _ = writeln!(
                        out,
                        r##"<rect x="{:.2}" y="{:.1}" width="{:.2}" height="{:.1}" fill="#c8c8c8"><title>{} staging</title></rect>"##,
                        x(staged_from),
                        y + 2.0,
                        x(start) - x(staged_from),
                        row - 4.0,
                        escape(&j.id)
                    );
                }
                let fill = if j.status == "failed" { "#d9534f" } else { "#4a7bd0" };
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{:.1}" width="{:.2}" height="{:.1}" fill="{fill}"><title>{} {}</title></rect>"#,
                    x(start),
                    y + 2.0,
                    (x(end) - x(start)).max(1.0),
                    row - 4.0,
                    escape(&j.id),
                    escape(&j.step)
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }

    pub fn render_summary(&self) -> String {
        let mut out = String::new();
        let count = |s: &str| self.jobs.iter().filter(|j| j.status == s).count();
        let _ = writeln!(out, "workflow: {}", self.workflow);
        let _ = writeln!(out, "run: {}", self.run_id);
        let _ = writeln!(out, "status: {}", self.status);
        let _ = writeln!(
            out,
            "jobs: {} ({} completed, {} failed)",
            self.jobs.len(),
            count("completed"),
            count("failed")
        );
        let _ = writeln!(out, "makespan: {:.3} s", self.makespan());
        let _ = writeln!(out, "busy time per model:");
        for (m, t) in self.busy_time() {
            let _ = writeln!(out, "  {m}: {t:.3} s");
        }
        let total: u64 = self.copies.iter().map(|c| c.bytes).sum();
        let _ = writeln!(out, "transfers: {} copies, {total} bytes", self.copies.len());
        let plans: BTreeSet<&str> = self.copies.iter().map(|c| c.plan.as_str()).collect();
        for p in plans {
            let of: Vec<_> = self.copies.iter().filter(|c| c.plan == p).collect();
            let bytes: u64 = of.iter().map(|c| c.bytes).sum();
            let _ = writeln!(out, "  {p}: {} copies, {bytes} bytes", of.len());
        }
        for e in &self.errors {
            let _ = writeln!(out, "error: {e}");
        }
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
