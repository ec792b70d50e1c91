use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::{StepPath, WorkflowError, WorkflowGraph};
use crate::config::BindingTable;

/// Node of the transformed graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum Node {
    Deploy(String),
    Task(StepPath),
    Undeploy(String),
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Deploy(m) => write!(f, "deploy({m})"),
            Node::Task(p) => write!(f, "{p}"),
            Node::Undeploy(m) => write!(f, "undeploy({m})"),
        }
    }
}

/// Workflow graph extended with one deployment and one undeployment node per
/// referenced model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedGraph {
    pub graph: WorkflowGraph,
    /// Model each task is bound to.
    pub task_models: BTreeMap<StepPath, String>,
    pub edges: BTreeSet<(Node, Node)>,
    /// Deployment nodes fire when their first dependent task becomes fireable
    /// rather than at workflow start.
    pub lazy: bool,
}

impl TransformedGraph {
    pub fn nodes(&self) -> BTreeSet<Node> {
        let mut nodes: BTreeSet<Node> = self.graph.steps.keys().cloned().map(Node::Task).collect();
        for model in self.models() {
            nodes.insert(Node::Deploy(model.clone()));
            nodes.insert(Node::Undeploy(model));
        }
        nodes
    }

    pub fn models(&self) -> BTreeSet<String> {
        self.task_models.values().cloned().collect()
    }

    pub fn synthetic_count(&self) -> usize {
        2 * self.models().len()
    }

    pub fn predecessors(&self, node: &Node) -> BTreeSet<Node> {
        self.edges
            .iter()
            .filter(|(_, to)| to == node)
            .map(|(from, _)| from.clone())
            .collect()
    }

    pub fn successors(&self, node: &Node) -> BTreeSet<Node> {
        self.edges
            .iter()
            .filter(|(from, _)| from == node)
            .map(|(_, to)| to.clone())
            .collect()
    }

    pub fn tasks_of(&self, model: &str) -> BTreeSet<StepPath> {
        self.task_models
            .iter()
            .filter(|(_, m)| m.as_str() == model)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn is_acyclic(&self) -> bool {
        let nodes = self.nodes();
        let mut indegree: BTreeMap<&Node, usize> = nodes.iter().map(|n| (n, 0)).collect();
        for (_, to) in &self.edges {
            *indegree.get_mut(to).expect("edge endpoint is a node") += 1;
        }
        let mut ready: Vec<&Node> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(n, _)| *n)
            .collect();
        let mut visited = 0;
        while let Some(n) = ready.pop() {
            visited += 1;
            for (from, to) in &self.edges {
                if from == n {
                    let d = indegree.get_mut(to).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        ready.push(to);
                    }
                }
            }
        }
        visited == nodes.len()
    }
}

pub fn transform_graph(
    graph: &WorkflowGraph,
    bindings: &BindingTable,
) -> Result<TransformedGraph, WorkflowError> {
    let mut task_models = BTreeMap::new();
    let mut edges = BTreeSet::new();
    for e in graph.edges() {
        edges.insert((Node::Task(e.producer), Node::Task(e.consumer)));
    }
    for path in graph.steps.keys() {
        let binding = bindings
            .get(path)
            .ok_or_else(|| WorkflowError::UnboundStep(path.clone()))?;
        let model = binding.target.model.clone();
        edges.insert((Node::Deploy(model.clone()), Node::Task(path.clone())));
        edges.insert((Node::Task(path.clone()), Node::Undeploy(model.clone())));
        task_models.insert(path.clone(), model);
    }
    Ok(TransformedGraph {
        graph: graph.clone(),
        task_models,
        edges,
        lazy: true,
    })
}

/// Tasks not yet completed whose task predecessors have all completed.
/// Deployment nodes are not waited on: a fireable task triggers its model's
/// deployment itself.
pub fn fireable_set(graph: &TransformedGraph, completed: &BTreeSet<StepPath>) -> BTreeSet<StepPath> {
    graph
        .graph
        .steps
        .keys()
        .filter(|p| !completed.contains(*p))
        .filter(|p| graph.graph.predecessors(p).iter().all(|d| completed.contains(d)))
        .cloned()
        .collect()
}
