use std::fs;
use std::path::{Path, PathBuf};

use hybridflow::config::load_with_registry;
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use hybridflow::connector::{
    Connector, ConnectorError, ConnectorRegistry, CopyKind, Resource, RunOutput, SandboxConfig,
    SandboxConnector,
};
use hybridflow::events::{Event, EventKind};
use hybridflow::report::RunReport;
use hybridflow::runtime::{execute_workflow, EngineOptions, RunOutcome, RunSetup, RunStatus};

struct Run {
    outcome: RunOutcome,
    out: PathBuf,
    _dir: tempfile::TempDir,
}

impl Run {
    fn report(&self) -> &RunReport {
        &self.outcome.report
    }

    fn events(&self) -> Vec<EventKind> {
        self.report().events.iter().map(|e| e.kind.clone()).collect()
    }

    fn count(&self, name: &str) -> usize {
        self.events().iter().filter(|e| e.name() == name).count()
    }

    fn position(&self, pred: impl Fn(&EventKind) -> bool) -> Option<usize> {
        self.events().iter().position(pred)
    }

    fn output(&self, key: &str) -> Vec<String> {
        self.report().outputs[key]
            .iter()
            .map(|o| match (&o.path, &o.value) {
                (Some(p), _) => fs::read_to_string(self.out.join(p)).unwrap(),
                (None, Some(v)) => v.clone(),
                _ => panic!("empty output record"),
            })
            .collect()
    }
}

fn run_with(models: &str, bindings: &str, workflow: &str, options: EngineOptions) -> Run {
    run_in_registry(models, bindings, workflow, options, ConnectorRegistry::default())
}

fn run_in_registry(
    models: &str,
    bindings: &str,
    workflow: &str,
    options: EngineOptions,
    registry: ConnectorRegistry,
) -> Run {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("wf.yml"), workflow).unwrap();
    let sf = format!(
        "version: v1.0\nworkflows:\n  main:\n    type: native\n    config: {{file: wf.yml}}\n    bindings:\n{bindings}models:\n{models}"
    );
    fs::write(dir.path().join("streamflow.yml"), sf).unwrap();
    let file = load_with_registry(&dir.path().join("streamflow.yml"), &registry).unwrap();
    let out = dir.path().join("out");
    let setup = RunSetup::from_file(&file, "main", registry, &out).unwrap();
    let outcome = execute_workflow(setup, &options).unwrap();
    Run {
        outcome,
        out: out.canonicalize().unwrap(),
        _dir: dir,
    }
}

fn run(models: &str, bindings: &str, workflow: &str) -> Run {
    run_with(models, bindings, workflow, EngineOptions::default())
}

const ONE_MODEL: &str = "  M:\n    type: sandbox\n    config: {services: {w: {replicas: 1}}}\n";
const TWO_MODELS: &str = "  M1:\n    type: sandbox\n    config: {services: {w: {replicas: 2}}}\n  M2:\n    type: sandbox\n    config: {services: {w: {replicas: 2}}}\n";
const ALL_ON_M: &str = "      - {step: /, target: {model: M, service: w}}\n";

#[test]
fn single_echo_task() {
    let r = run(
        ONE_MODEL,
        ALL_ON_M,
        "steps:\n  hello:\n    command: echo hi\n    out: {greeting: {type: value, from: stdout}}\n",
    );
    assert_eq!(r.outcome.status, RunStatus::Completed, "{:?}", r.report().errors);
    assert_eq!(r.report().jobs.len(), 1);
    assert_eq!(r.report().jobs[0].status, "completed");
    assert_eq!(r.count("deploy_finished"), 1);
    assert_eq!(r.count("undeploy_finished"), 1);
    assert_eq!(r.output("/hello/greeting"), ["hi"]);
}

const CHAIN: &str = r#"
inputs:
  seed: {type: value, value: abc}
steps:
  produce:
    command: "printf '%s' {seed} > data.txt"
    in: {seed: seed}
    out: {data: {glob: data.txt}}
  consume:
    command: "tr a-z A-Z < {data} > up.txt"
    in: {data: produce/data}
    out: {up: {glob: up.txt}}
"#;

#[test]
fn chain_across_models_moves_data_in_two_steps_and_deploys_lazily() {
    let r = run(
        TWO_MODELS,
        "      - {step: /produce, target: {model: M1, service: w}}\n      - {step: /consume, target: {model: M2, service: w}}\n",
        CHAIN,
    );
    assert_eq!(r.outcome.status, RunStatus::Completed, "{:?}", r.report().errors);
    assert_eq!(r.output("/consume/up"), ["ABC"]);
    let staged: Vec<_> = r
        .report()
        .copies
        .iter()
        .filter(|c| c.destination.starts_with("M2/"))
        .collect();
    assert_eq!(staged.len(), 1);
    assert_eq!(
        r.report().copies.iter().filter(|c| c.plan == "two_step_via_management").count(),
        2
    );
    let produced = r
        .position(|e| matches!(e, EventKind::JobFinished { step, .. } if step == "/produce"))
        .unwrap();
    let deploy_m2 = r
        .position(|e| matches!(e, EventKind::DeployStarted { model } if model == "M2"))
        .unwrap();
    assert!(deploy_m2 > produced);
}

#[test]
fn eager_option_deploys_everything_first() {
    let r = run_with(
        TWO_MODELS,
        "      - {step: /produce, target: {model: M1, service: w}}\n      - {step: /consume, target: {model: M2, service: w}}\n",
        CHAIN,
        EngineOptions {
            eager: true,
            ..EngineOptions::default()
        },
    );
    assert_eq!(r.outcome.status, RunStatus::Completed);
    let first_job = r.position(|e| e.name() == "job_started").unwrap();
    let deploy_m2 = r
        .position(|e| matches!(e, EventKind::DeployFinished { model, .. } if model == "M2"))
        .unwrap();
    assert!(deploy_m2 < first_job);
}

#[test]
fn failure_stops_the_chain_but_not_independent_steps() {
    let r = run(
        ONE_MODEL,
        ALL_ON_M,
        r#"
steps:
  bad:
    command: "echo oops >&2; exit 4"
    out: {o: {glob: o}}
  after:
    command: "cat {i}"
    in: {i: bad/o}
  other:
    command: echo fine
    out: {v: {type: value, from: stdout}}
"#,
    );
    assert_eq!(r.outcome.status, RunStatus::Failed);
    let status = |s: &str| {
        r.report()
            .jobs
            .iter()
            .find(|j| j.step == s)
            .map(|j| j.status.clone())
    };
    assert_eq!(status("/bad").as_deref(), Some("failed"));
    assert_eq!(status("/after"), None);
    assert_eq!(status("/other").as_deref(), Some("completed"));
    assert!(r
        .events()
        .iter()
        .any(|e| matches!(e, EventKind::StepFailed { step, .. } if step == "/after")));
    assert_eq!(r.report().jobs.iter().find(|j| j.step == "/bad").unwrap().exit_codes, [4]);
    assert_eq!(r.count("undeploy_finished"), 1);
}

#[test]
fn dynamic_scatter_replicates_the_downstream_chain() {
    let r = run(
        TWO_MODELS,
        "      - {step: /, target: {model: M1, service: w}}\n",
        r#"
steps:
  split:
    command: "for i in 1 2 3; do echo $i > part_$i; done"
    out: {parts: {glob: "part_*", list: true}}
  square:
    command: "n=$(cat {p}); echo $((n*n)) > sq"
    in: {p: split/parts}
    out: {sq: {glob: sq}}
    scatter: p
  label:
    command: "printf 'v=%s' $(cat {s}) > l"
    in: {s: square/sq}
    out: {l: {glob: l}}
"#,
    );
    assert_eq!(r.outcome.status, RunStatus::Completed, "{:?}", r.report().errors);
    assert_eq!(r.count("scatter_expanded"), 1);
    let mut steps: Vec<_> = r.report().jobs.iter().map(|j| j.step.clone()).collect();
    steps.sort();
    assert_eq!(
        steps,
        ["/label/0", "/label/1", "/label/2", "/split", "/square/0", "/square/1", "/square/2"]
    );
    assert_eq!(r.output("/label/0/l"), ["v=1"]);
    assert_eq!(r.output("/label/2/l"), ["v=9"]);
}

#[test]
fn rank_variables_and_outputs_across_ranks() {
    let r = run(
        "  M:\n    type: sandbox\n    config: {services: {w: {replicas: 6}}}\n",
        "      - {step: /, target: {model: M, service: w}, replicas: 4}\n",
        r#"
steps:
  mpi:
    command: "echo \"$STREAMFLOW_RANK $STREAMFLOW_HOSTS\" > rank.txt; if [ \"$STREAMFLOW_RANK\" = 0 ]; then echo m > master.out; fi"
    out:
      ranks: {glob: rank.txt, list: true}
      master: {glob: "master*", list: true}
"#,
    );
    assert_eq!(r.outcome.status, RunStatus::Completed, "{:?}", r.report().errors);
    let ranks = r.output("/mpi/ranks");
    assert_eq!(ranks.len(), 4);
    let mut seen = Vec::new();
    let mut hosts = None;
    for line in &ranks {
        let (rank, h) = line.trim().split_once(' ').unwrap();
        seen.push(rank.parse::<u32>().unwrap());
        assert_eq!(h.split(',').count(), 4);
        assert_eq!(*hosts.get_or_insert(h.to_string()), h);
    }
    seen.sort();
    assert_eq!(seen, [0, 1, 2, 3]);
    assert_eq!(r.output("/mpi/master").len(), 1);
}

#[test]
fn no_rank_variables_without_the_directive() {
    let r = run(
        ONE_MODEL,
        ALL_ON_M,
        "steps:\n  a:\n    command: 'echo \"[${STREAMFLOW_RANK:-none}]\"'\n    out: {v: {type: value, from: stdout}}\n",
    );
    assert_eq!(r.output("/a/v"), ["[none]"]);
}

fn recycle_run(recycle: bool) -> Run {
    run(
        ONE_MODEL,
        &format!("      - {{step: /, target: {{model: M, service: w}}}}\n      - {{step: /second, target: {{model: M, service: w}}, recycle: {recycle}}}\n"),
        r#"
steps:
  first:
    command: "echo planted > $HOME/planted; echo result > r.txt"
    out: {r: {glob: r.txt}}
  second:
    command: "cat {r} > /dev/null; if [ -e $HOME/planted ]; then echo present; else echo absent; fi"
    in: {r: first/r}
    out: {seen: {type: value, from: stdout}}
"#,
    )
}

#[test]
fn service_state_persists_without_recycle() {
    let r = recycle_run(false);
    assert_eq!(r.outcome.status, RunStatus::Completed, "{:?}", r.report().errors);
    assert_eq!(r.output("/second/seen"), ["present"]);
    assert_eq!(r.count("redeploy_finished"), 0);
    let jobs = &r.report().jobs;
    assert_eq!(jobs[0].resources, jobs[1].resources);
}

#[test]
fn recycle_gives_a_clean_service() {
    let r = recycle_run(true);
    assert_eq!(r.outcome.status, RunStatus::Completed, "{:?}", r.report().errors);
    assert_eq!(r.output("/second/seen"), ["absent"]);
    assert_eq!(r.count("redeploy_finished"), 1);
    let jobs = &r.report().jobs;
    assert_ne!(jobs[0].resources, jobs[1].resources);
    // The first step's output was saved before its resource went away.
    let secured = r
        .position(|e| matches!(e, EventKind::Copy { destination, .. } if destination.starts_with("management:")))
        .unwrap();
    let redeploy = r.position(|e| e.name() == "redeploy_started").unwrap();
    assert!(secured < redeploy);
}

#[test]
fn file_inputs_come_from_the_management_node() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    fs::write(&input, "12345").unwrap();
    let wf = format!(
        "inputs:\n  f: {{type: file, path: {}}}\nsteps:\n  count:\n    command: 'wc -c < {{f}}'\n    in: {{f: f}}\n    out: {{n: {{type: value, from: stdout}}}}\n",
        input.display()
    );
    let r = run(ONE_MODEL, ALL_ON_M, &wf);
    assert_eq!(r.outcome.status, RunStatus::Completed, "{:?}", r.report().errors);
    assert_eq!(r.output("/count/n")[0].trim(), "5");
    assert_eq!(r.report().copies.len(), 1);
    assert_eq!(r.report().copies[0].plan, "from_management");
}

fn normalized(events: &[Event]) -> Vec<EventKind> {
    events.iter().map(|e| e.kind.without_timing()).collect()
}

#[test]
fn serial_runs_repeat_exactly() {
    let go = || {
        run_with(
            TWO_MODELS,
            "      - {step: /, target: {model: M1, service: w}}\n      - {step: /label, target: {model: M2, service: w}}\n",
            r#"
steps:
  split:
    command: "for i in 1 2 3 4; do echo $i > part_$i; done"
    out: {parts: {glob: "part_*", list: true}}
  square:
    command: "cat {p} > sq"
    in: {p: split/parts}
    out: {sq: {glob: sq}}
    scatter: p
  label:
    command: "cat {s} > l"
    in: {s: square/sq}
    out: {l: {glob: l}}
"#,
            EngineOptions {
                serial: true,
                ..EngineOptions::default()
            },
        )
    };
    let a = go();
    let b = go();
    assert_eq!(a.outcome.status, RunStatus::Completed, "{:?}", a.report().errors);
    assert_eq!(normalized(&a.report().events), normalized(&b.report().events));
}

#[test]
fn report_survives_a_round_trip_through_json() {
    let r = run(ONE_MODEL, ALL_ON_M, "steps:\n  a: {command: 'true'}\n");
    let text = r.report().to_json();
    assert_eq!(&RunReport::from_json(&text).unwrap(), r.report());
    assert!(Path::new(&r.out).join("data").exists() || r.report().outputs.is_empty());
}

/// A sandbox whose teardown always fails.
struct StuckSandbox(SandboxConnector);

impl Connector for StuckSandbox {
    fn model(&self) -> &str {
        self.0.model()
    }
    fn service_names(&self) -> Vec<String> {
        self.0.service_names()
    }
    fn deploy(&self) -> Result<Vec<Resource>, ConnectorError> {
        self.0.deploy()
    }
    fn undeploy(&self) -> Result<(), ConnectorError> {
        self.0.undeploy()?;
        Err(ConnectorError::Unsupported("undeploy"))
    }
    fn get_available_resources(&self, service: &str) -> Result<Vec<Resource>, ConnectorError> {
        self.0.get_available_resources(service)
    }
    fn copy(
        &self,
        src: &str,
        dst: &str,
        resource: &Resource,
        kind: CopyKind,
        source: Option<&Resource>,
    ) -> Result<u64, ConnectorError> {
        self.0.copy(src, dst, resource, kind, source)
    }
    fn run(
        &self,
        resource: &Resource,
        command: &str,
        environment: &BTreeMap<String, String>,
        workdir: &str,
        timeout: Option<Duration>,
    ) -> Result<RunOutput, ConnectorError> {
        self.0.run(resource, command, environment, workdir, timeout)
    }
    fn size(&self, resource: &Resource, path: &str) -> Result<Option<u64>, ConnectorError> {
        self.0.size(resource, path)
    }
    fn command_path(&self, resource: &Resource, path: &str) -> String {
        self.0.command_path(resource, path)
    }
}

#[test]
fn teardown_failure_outranks_task_failure() {
    let mut registry = ConnectorRegistry::default();
    registry.register("stuck", |model, config, ctx| {
        let config = SandboxConfig::from_value(model, config)?;
        Ok(Arc::new(StuckSandbox(SandboxConnector::new(model, config, &ctx.sandbox_root))) as Arc<dyn Connector>)
    });
    let models = "  M:\n    type: stuck\n    config: {services: {w: {}}}\n  N:\n    type: sandbox\n    config: {services: {w: {}}}\n";
    let bindings = "      - {step: /, target: {model: M, service: w}}\n      - {step: /other, target: {model: N, service: w}}\n";
    let workflow = "steps:\n  a: {command: 'exit 1'}\n  other: {command: 'true'}\n";
    let r = run_in_registry(models, bindings, workflow, EngineOptions::default(), registry);
    assert_eq!(r.outcome.status, RunStatus::TeardownFailed);
    assert!(r.report().jobs.iter().any(|j| j.status == "failed"));
    assert_eq!(r.count("undeploy_failed"), 1);
    // The healthy model is still torn down.
    assert!(r
        .events()
        .iter()
        .any(|e| matches!(e, EventKind::UndeployFinished { model } if model == "N")));
}
