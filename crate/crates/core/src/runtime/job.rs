//! Execution of one scheduled job on its resources.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::connector::{Connector, Resource, RunOutput};
use crate::datamgr::Site;
use crate::events::EventKind;
use crate::scheduler::{JobId, JobStatus};
use crate::wfmodel::{substitute, DataKind, DataToken, OutputCapture, OutputPort, StepPath, StepSpec, TokenId};

use super::Shared;

pub const RANK_VAR: &str = "STREAMFLOW_RANK";
pub const HOSTS_VAR: &str = "STREAMFLOW_HOSTS";

/// Tokens feeding one input port.
#[derive(Debug, Clone)]
pub(crate) struct BoundInput {
    pub name: String,
    /// The port receives the whole list rather than one element.
    pub list: bool,
    pub tokens: Vec<DataToken>,
}

#[derive(Debug, Clone)]
pub(crate) struct JobPlan {
    pub job: JobId,
    pub step: StepPath,
    pub spec: StepSpec,
    pub model: String,
    pub resources: Vec<Resource>,
    /// Inject rank variables (an explicit `replicas` directive was given).
    pub ranked: bool,
    pub inputs: Vec<BoundInput>,
}

#[derive(Debug)]
pub(crate) struct JobResult {
    pub job: JobId,
    pub step: StepPath,
    pub status: JobStatus,
    pub outputs: Vec<(String, Vec<TokenId>)>,
    pub error: Option<String>,
}

pub fn workdir(job: JobId) -> String {
    format!("/work/{job}")
}

pub fn staging_path(job: JobId, input: &str, index: Option<usize>, name: &str) -> String {
    match index {
        Some(i) => format!("/staging/{job}/{input}/{i}/{name}"),
        None => format!("/staging/{job}/{input}/{name}"),
    }
}

fn quote(s: &str) -> String {
    shlex::try_quote(s)
        .map(|q| q.into_owned())
        .unwrap_or_else(|_| format!("'{}'", s.replace('\0', "")))
}

/// Shell word matching `pattern` as a glob and nothing else.
fn glob_word(pattern: &str) -> String {
    let mut out = String::new();
    for c in pattern.chars() {
        match c {
            '*' | '?' | '[' | ']' | '/' | '.' | '_' | '-' => out.push(c),
            c if c.is_ascii_alphanumeric() => out.push(c),
            '\n' => out.push_str("'\n'"),
            c => {
                out.push('\\');
                out.push(c);
            }
        }
    }
    out
}

pub(crate) fn run_job(shared: &Arc<Shared>, plan: JobPlan) -> JobResult {
    let job = plan.job;
    let fail = |error: String, exit_codes: Vec<i32>| {
        shared.events.emit(EventKind::JobFinished {
            job: job.to_string(),
            step: plan.step.to_string(),
            status: JobStatus::Failed.to_string(),
            exit_codes,
        });
        JobResult {
            job,
            step: plan.step.clone(),
            status: JobStatus::Failed,
            outputs: Vec::new(),
            error: Some(error),
        }
    };
    let connector = match shared.deployment.connector(&plan.model) {
        Ok(c) => c,
        Err(e) => return fail(e.to_string(), vec![]),
    };

    // Stage inputs on every rank and build the per-rank substitutions.
    let mut substitutions: Vec<BTreeMap<String, String>> = Vec::new();
    for resource in &plan.resources {
        let mut values = BTreeMap::new();
        for input in &plan.inputs {
            let mut words = Vec::new();
            for (i, token) in input.tokens.iter().enumerate() {
                if token.kind == DataKind::Value {
                    words.push(quote(token.value.as_deref().unwrap_or("")));
                    continue;
                }
                let index = input.list.then_some(i);
                let dest = staging_path(job, &input.name, index, &token.name);
                match shared.data.stage(token.id, resource, &dest) {
                    Ok(p) => words.push(quote(&connector.command_path(resource, &p.read_path))),
                    Err(e) => {
                        return fail(
                            format!("staging input `{}` on {resource}: {e}", input.name),
                            vec![],
                        )
                    }
                }
            }
            values.insert(input.name.clone(), words.join(" "));
        }
        substitutions.push(values);
    }
    shared.events.emit(EventKind::InputsStaged {
        job: job.to_string(),
    });

    let hosts = plan
        .resources
        .iter()
        .map(|r| r.hostname.as_str())
        .collect::<Vec<_>>()
        .join(",");
    let commands: Vec<(String, BTreeMap<String, String>)> = substitutions
        .iter()
        .enumerate()
        .map(|(rank, values)| {
            let cmd = substitute(&plan.spec.command, |name| values.get(name).cloned());
            let mut env = BTreeMap::new();
            if plan.ranked {
                env.insert(RANK_VAR.to_string(), rank.to_string());
                env.insert(HOSTS_VAR.to_string(), hosts.clone());
            }
            (cmd, env)
        })
        .collect();

    shared.events.emit(EventKind::JobStarted {
        job: job.to_string(),
    });
    let wd = workdir(job);
    let run_rank = |rank: usize| -> Result<RunOutput, String> {
        let (cmd, env) = &commands[rank];
        connector
            .run(&plan.resources[rank], cmd, env, &wd, plan.spec.timeout)
            .map_err(|e| e.to_string())
    };
    let results: Vec<Result<RunOutput, String>> = if shared.serial || plan.resources.len() == 1 {
        (0..plan.resources.len()).map(run_rank).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..plan.resources.len())
                .map(|rank| s.spawn(move || run_rank(rank)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err("rank panicked".into())))
                .collect()
        })
    };

    let exit_codes: Vec<i32> = results
        .iter()
        .map(|r| r.as_ref().map(|o| o.exit_code).unwrap_or(-1))
        .collect();
    let mut problems = Vec::new();
    for (rank, r) in results.iter().enumerate() {
        match r {
            Err(e) => problems.push(format!("rank {rank}: {e}")),
            Ok(o) if o.exit_code != 0 => {
                let stderr = String::from_utf8_lossy(&o.stderr);
                let tail: String = stderr.trim_end().lines().last().unwrap_or("").to_string();
                problems.push(format!("rank {rank} exited with {}: {tail}", o.exit_code));
            }
            Ok(_) => {}
        }
    }
    if !problems.is_empty() {
        return fail(problems.join("; "), exit_codes);
    }
    let outputs: Vec<RunOutput> = results.into_iter().map(|r| r.expect("checked")).collect();

    let mut collected = Vec::new();
    for port in &plan.spec.outputs {
        match collect_port(shared, &*connector, &plan, port, &outputs) {
            Ok(tokens) => collected.push((port.name.clone(), tokens)),
            Err(e) => return fail(format!("output `{}`: {e}", port.name), exit_codes),
        }
    }
    shared.events.emit(EventKind::JobFinished {
        job: job.to_string(),
        step: plan.step.to_string(),
        status: JobStatus::Completed.to_string(),
        exit_codes,
    });
    JobResult {
        job,
        step: plan.step.clone(),
        status: JobStatus::Completed,
        outputs: collected,
        error: None,
    }
}

fn collect_port(
    shared: &Shared,
    connector: &dyn Connector,
    plan: &JobPlan,
    port: &OutputPort,
    outputs: &[RunOutput],
) -> Result<Vec<TokenId>, String> {
    match &port.capture {
        OutputCapture::Stdout => {
            let text = String::from_utf8_lossy(&outputs[0].stdout).into_owned();
            let text = text.strip_suffix('\n').unwrap_or(&text).to_string();
            let values: Vec<String> = if port.list {
                text.lines().map(str::to_string).collect()
            } else {
                vec![text]
            };
            Ok(values
                .into_iter()
                .map(|v| {
                    shared
                        .data
                        .register_token(DataKind::Value, &port.name, Some(v))
                        .id
                })
                .collect())
        }
        OutputCapture::Glob(pattern) => {
            let wd = workdir(plan.job);
            let listing = format!(
                "for f in {}; do if [ -e \"$f\" ]; then printf '%s\\n' \"$f\"; fi; done",
                glob_word(pattern)
            );
            let mut found: Vec<(usize, String)> = Vec::new();
            for (rank, resource) in plan.resources.iter().enumerate() {
                let out = connector
                    .run(resource, &listing, &BTreeMap::new(), &wd, None)
                    .map_err(|e| e.to_string())?;
                let mut matches: Vec<String> = String::from_utf8_lossy(&out.stdout)
                    .lines()
                    .filter(|l| !l.is_empty())
                    .map(str::to_string)
                    .collect();
                matches.sort();
                if !port.list && matches.len() > 1 {
                    return Err(format!(
                        "pattern `{pattern}` matched {} paths on {resource}",
                        matches.len()
                    ));
                }
                found.extend(matches.into_iter().map(|m| (rank, m)));
            }
            if found.is_empty() {
                return Err(format!("pattern `{pattern}` matched nothing"));
            }
            if !port.list {
                found.truncate(1);
            }
            let mut tokens = Vec::new();
            for (rank, rel) in found {
                let name = rel.rsplit('/').next().unwrap_or(&rel).to_string();
                let token = shared.data.register_token(port.kind, &name, None);
                shared
                    .data
                    .add_remote_path_mapping(
                        token.id,
                        Site::Remote(plan.resources[rank].clone()),
                        &format!("{wd}/{rel}"),
                    )
                    .map_err(|e| e.to_string())?;
                tokens.push(token.id);
            }
            Ok(tokens)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_words_keep_wildcards_and_escape_the_rest() {
        assert_eq!(glob_word("out/*.txt"), "out/*.txt");
        assert_eq!(glob_word("a b;c"), "a\\ b\\;c");
        assert_eq!(glob_word("$(x)"), "\\$\\(x\\)");
    }

    #[test]
    fn paths() {
        assert_eq!(workdir(JobId(3)), "/work/j0003");
        assert_eq!(staging_path(JobId(3), "i", None, "f"), "/staging/j0003/i/f");
        assert_eq!(staging_path(JobId(3), "i", Some(2), "f"), "/staging/j0003/i/2/f");
    }
}
