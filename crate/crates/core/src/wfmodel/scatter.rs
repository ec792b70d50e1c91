use std::collections::{BTreeMap, BTreeSet};

use super::{Source, StepPath, WorkflowError, WorkflowGraph};

/// Replaces the scatter step `step` with `cardinality` replicas `step/i`, each
/// consuming element `i` of the scattered list. Every transitive consumer is
/// replicated per branch as `consumer/i`, so branches form independent chains.
pub fn expand_scatter(
    graph: &WorkflowGraph,
    step: &StepPath,
    cardinality: usize,
) -> Result<WorkflowGraph, WorkflowError> {
    let spec = graph
        .steps
        .get(step)
        .ok_or_else(|| WorkflowError::UnknownStep(step.clone()))?;
    let scatter = spec
        .scatter
        .as_ref()
        .ok_or_else(|| WorkflowError::NotScattered(step.clone()))?;
    if cardinality == 0 {
        return Err(WorkflowError::EmptyScatter(step.clone()));
    }

    let downstream = graph.descendants(step);
    check_rejoin(graph, step, &downstream)?;

    let mut branch: BTreeSet<StepPath> = downstream;
    branch.insert(step.clone());

    let mut steps: BTreeMap<_, _> = graph
        .steps
        .iter()
        .filter(|(p, _)| !branch.contains(*p))
        .map(|(p, s)| (p.clone(), s.clone()))
        .collect();

    for i in 0..cardinality {
        let index = i.to_string();
        for original in &branch {
            let mut replica = graph.steps[original].clone();
            for input in &mut replica.inputs {
                if let Source::Step { step: producer, .. } = &mut input.source {
                    if branch.contains(producer) {
                        *producer = producer.join(&index)?;
                    }
                }
            }
            if original == step {
                replica.scatter = None;
                for input in &mut replica.inputs {
                    if input.name == scatter.input {
                        input.element = Some(i);
                    }
                }
            }
            replica.scatter_origin = Some(step.clone());
            steps.insert(original.join(&index)?, replica);
        }
    }

    WorkflowGraph::new(graph.inputs.clone(), steps)
}

fn check_rejoin(
    graph: &WorkflowGraph,
    step: &StepPath,
    downstream: &BTreeSet<StepPath>,
) -> Result<(), WorkflowError> {
    let own_origin = graph.steps[step].scatter_origin.as_ref();
    for d in downstream {
        if let Some(origin) = &graph.steps[d].scatter_origin {
            if Some(origin) != own_origin {
                return Err(WorkflowError::Rejoin {
                    step: d.clone(),
                    first: step.clone(),
                    second: origin.clone(),
                });
            }
        }
    }
    for (other, spec) in &graph.steps {
        if other == step || spec.scatter.is_none() || downstream.contains(other) {
            continue;
        }
        let theirs = graph.descendants(other);
        if theirs.contains(step) {
            continue;
        }
        if let Some(meet) = theirs.intersection(downstream).next() {
            return Err(WorkflowError::Rejoin {
                step: meet.clone(),
                first: step.clone(),
                second: other.clone(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{parse_workflow, Edge};
    use super::*;

    fn p(s: &str) -> StepPath {
        StepPath::parse(s).unwrap()
    }

    const CHAIN: &str = r#"
inputs:
  seed: {type: file, path: seed.txt}
steps:
  a:
    command: split -l 1 {seed} part_
    in: {seed: seed}
    out: {parts: {glob: "part_*", list: true}}
  b:
    command: wc -l {part} > n
    in: {part: a/parts}
    scatter: part
    out: {n: {glob: n}}
  c:
    command: cat {n} > m
    in: {n: b/n}
    out: {m: {glob: m}}
"#;

    fn edge(prod: &str, out: &str, cons: &str, inp: &str) -> Edge {
        Edge {
            producer: p(prod),
            output: out.into(),
            consumer: p(cons),
            input: inp.into(),
        }
    }

    #[test]
    fn chain_of_three_expands_to_parallel_chains() {
        let g = parse_workflow(CHAIN).unwrap();
        let x = expand_scatter(&g, &p("/b"), 3).unwrap();

        // Hand-enumerated: 1 source + 3 b replicas + 3 c replicas.
        let nodes: BTreeSet<StepPath> = x.steps.keys().cloned().collect();
        let expected_nodes: BTreeSet<StepPath> = [
            "/a", "/b/0", "/b/1", "/b/2", "/c/0", "/c/1", "/c/2",
        ]
        .into_iter()
        .map(p)
        .collect();
        assert_eq!(nodes, expected_nodes);

        let expected_edges: BTreeSet<Edge> = [
            edge("/a", "parts", "/b/0", "part"),
            edge("/a", "parts", "/b/1", "part"),
            edge("/a", "parts", "/b/2", "part"),
            edge("/b/0", "n", "/c/0", "n"),
            edge("/b/1", "n", "/c/1", "n"),
            edge("/b/2", "n", "/c/2", "n"),
        ]
        .into_iter()
        .collect();
        assert_eq!(x.edges(), expected_edges);

        for i in 0..3 {
            let b = &x.steps[&p(&format!("/b/{i}"))];
            assert_eq!(b.inputs[0].element, Some(i));
            assert!(b.scatter.is_none());
            assert!(!x.input_is_list(&p(&format!("/b/{i}")), "part"));
        }
    }

    #[test]
    fn cardinality_one_is_identity_up_to_renaming() {
        let g = parse_workflow(CHAIN).unwrap();
        let x = expand_scatter(&g, &p("/b"), 1).unwrap();
        assert_eq!(x.steps.len(), g.steps.len());
        let renamed: BTreeSet<Edge> = g
            .edges()
            .into_iter()
            .map(|e| Edge {
                consumer: if e.consumer == p("/a") { e.consumer } else { e.consumer.join("0").unwrap() },
                producer: if e.producer == p("/a") { e.producer } else { e.producer.join("0").unwrap() },
                ..e
            })
            .collect();
        assert_eq!(x.edges(), renamed);
    }

    #[test]
    fn zero_cardinality_is_an_error() {
        let g = parse_workflow(CHAIN).unwrap();
        assert_eq!(
            expand_scatter(&g, &p("/b"), 0),
            Err(WorkflowError::EmptyScatter(p("/b")))
        );
    }

    #[test]
    fn non_scatter_step_is_rejected() {
        let g = parse_workflow(CHAIN).unwrap();
        assert_eq!(
            expand_scatter(&g, &p("/c"), 2),
            Err(WorkflowError::NotScattered(p("/c")))
        );
    }

    #[test]
    fn rejoining_branches_are_rejected() {
        let doc = r#"
inputs:
  xs: {type: value, value: [a, b]}
steps:
  l:
    command: echo {x} > o
    in: {x: xs}
    scatter: x
    out: {o: {glob: o}}
  r:
    command: echo {x} > o
    in: {x: xs}
    scatter: x
    out: {o: {glob: o}}
  j:
    command: cat {a} {b}
    in: {a: l/o, b: r/o}
"#;
        let g = parse_workflow(doc).unwrap();
        assert!(matches!(
            expand_scatter(&g, &p("/l"), 2),
            Err(WorkflowError::Rejoin { .. })
        ));
    }
}
