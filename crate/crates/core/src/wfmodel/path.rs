use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::WorkflowError;

/// Posix-like absolute path naming a task (file) or a sub-workflow (folder).
///
/// The root `/` names the outermost workflow. Components are non-empty and
/// may not be `.` or `..`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StepPath(String);

impl StepPath {
    pub fn root() -> Self {
        StepPath("/".to_string())
    }

    pub fn parse(s: &str) -> Result<Self, WorkflowError> {
        if !s.starts_with('/') {
            return Err(WorkflowError::InvalidPath(s.to_string()));
        }
        if s == "/" {
            return Ok(Self::root());
        }
        let trimmed = s.trim_end_matches('/');
        for c in trimmed[1..].split('/') {
            if !is_valid_component(c) {
                return Err(WorkflowError::InvalidPath(s.to_string()));
            }
        }
        Ok(StepPath(trimmed.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0 == "/"
    }

    pub fn components(&self) -> impl Iterator<Item = &str> {
        self.0.split('/').filter(|c| !c.is_empty())
    }

    pub fn depth(&self) -> usize {
        self.components().count()
    }

    /// Last component, or `""` for the root.
    pub fn name(&self) -> &str {
        self.components().last().unwrap_or("")
    }

    pub fn parent(&self) -> Option<StepPath> {
        if self.is_root() {
            return None;
        }
        match self.0.rfind('/') {
            Some(0) => Some(Self::root()),
            Some(i) => Some(StepPath(self.0[..i].to_string())),
            None => None,
        }
    }

    pub fn join(&self, component: &str) -> Result<StepPath, WorkflowError> {
        if !is_valid_component(component) {
            return Err(WorkflowError::InvalidPath(format!(
                "{}/{}",
                self.0.trim_end_matches('/'),
                component
            )));
        }
        if self.is_root() {
            Ok(StepPath(format!("/{component}")))
        } else {
            Ok(StepPath(format!("{}/{}", self.0, component)))
        }
    }

    /// Component-wise prefix test. Every path is a prefix of itself and the
    /// root is a prefix of everything.
    pub fn is_prefix_of(&self, other: &StepPath) -> bool {
        if self.is_root() {
            return true;
        }
        other.0 == self.0
            || (other.0.starts_with(&self.0) && other.0.as_bytes()[self.0.len()] == b'/')
    }

    /// Replaces the prefix `from` with `to`. Returns `None` if `from` is not a
    /// prefix of `self`.
    pub fn rebase(&self, from: &StepPath, to: &StepPath) -> Option<StepPath> {
        if !from.is_prefix_of(self) {
            return None;
        }
        let rest: Vec<&str> = self.components().skip(from.depth()).collect();
        let mut out = to.clone();
        for c in rest {
            out = out.join(c).ok()?;
        }
        Some(out)
    }
}

pub(crate) fn is_valid_component(c: &str) -> bool {
    !c.is_empty() && c != "." && c != ".." && !c.contains('/') && !c.contains('#')
}

impl fmt::Display for StepPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for StepPath {
    type Err = WorkflowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StepPath::parse(s)
    }
}

impl Serialize for StepPath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for StepPath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        StepPath::parse(&s).map_err(serde::de::Error::custom)
    }
}
