//! Scenario files: applications, weighted call templates and run settings.
//!
//! ```json
//! {
//!   "name": "demo",
//!   "mode": "application_monitoring",
//!   "trace_count": 10,
//!   "seed": 7,
//!   "applications": [
//!     { "service_name": "shop",
//!       "classes": [ { "fqn": "org.shop.Cart", "methods": ["add", "total"] } ] }
//!   ],
//!   "call_templates": [
//!     { "weight": 1,
//!       "root": { "service": "shop", "call": "org.shop.Cart#add",
//!                 "children": [ { "service": "shop", "call": "org.shop.Cart#total" } ] } }
//!   ]
//! }
//! ```
//!
//! In `distributed_only` mode a node's `call` names one of the application's
//! `routes` instead of a `Class#method`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ApplicationMonitoring,
    DistributedOnly,
    UnitTestBurst,
}

impl Mode {
    pub fn uses_code_attributes(self) -> bool {
        !matches!(self, Mode::DistributedOnly)
    }
}

pub const DEFAULT_START_UNIX_NANO: u64 = 1_700_000_000_000_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub mode: Mode,
    pub trace_count: u64,
    pub seed: u64,
    #[serde(default)]
    pub warmup_skip_traces: u64,
    #[serde(default = "default_start")]
    pub start_unix_nano: u64,
    /// Gap between consecutive trace starts.
    #[serde(default = "default_interval")]
    pub trace_interval_nano: u64,
    pub applications: Vec<AppSpec>,
    pub call_templates: Vec<CallTemplate>,
}

fn default_start() -> u64 {
    DEFAULT_START_UNIX_NANO
}

fn default_interval() -> u64 {
    1_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub service_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
    #[serde(default)]
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub routes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub fqn: String,
    pub methods: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallTemplate {
    #[serde(default)]
    pub name: String,
    pub weight: u32,
    pub root: CallNode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallNode {
    /// `service_name` or `service_name#instance_id`.
    pub service: String,
    /// `fqn#method`, or a route name in `distributed_only` mode.
    pub call: String,
    #[serde(default)]
    pub children: Vec<CallNode>,
}

impl CallNode {
    pub fn node_count(&self) -> u64 {
        1 + self.children.iter().map(CallNode::node_count).sum::<u64>()
    }

    /// Pre-order walk with the parent of each node.
    pub fn walk<'a>(&'a self, parent: Option<&'a CallNode>, f: &mut impl FnMut(Option<&'a CallNode>, &'a CallNode)) {
        f(parent, self);
        for c in &self.children {
            c.walk(Some(self), f);
        }
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(CallNode::depth).max().unwrap_or(0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scenario is invalid: {0}")]
    Invalid(String),
}

/// Splits `fqn#method` into `(package path, class, method)`.
pub fn split_call(call: &str) -> Option<(Vec<&str>, &str, &str)> {
    let (fqn, method) = call.split_once('#')?;
    if method.is_empty() {
        return None;
    }
    let mut parts: Vec<&str> = fqn.split('.').collect();
    let class = parts.pop()?;
    if class.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return None;
    }
    Some((parts, class, method))
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn app(&self, service: &str) -> Option<&AppSpec> {
        let (name, instance) = match service.split_once('#') {
            Some((n, i)) => (n, Some(i)),
            None => (service, None),
        };
        self.applications
            .iter()
            .find(|a| a.service_name == name && a.instance_id.as_deref() == instance)
    }

    pub fn spans_per_template(&self) -> Vec<u64> {
        self.call_templates.iter().map(|t| t.root.node_count()).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.warmup_skip_traces > self.trace_count {
            return invalid("warmup_skip_traces exceeds trace_count".into());
        }
        if self.trace_count > 0 && self.call_templates.iter().all(|t| t.weight == 0) {
            return invalid("at least one call template needs a positive weight".into());
        }
        let mut keys = BTreeSet::new();
        for app in &self.applications {
            if app.service_name.is_empty() || app.service_name.contains('#') {
                return invalid(format!("bad service name {:?}", app.service_name));
            }
            if !keys.insert((&app.service_name, &app.instance_id)) {
                return invalid(format!("application {} declared twice", app.service_name));
            }
            let mut fqns = BTreeSet::new();
            for class in &app.classes {
                if split_call(&format!("{}#m", class.fqn)).is_none() {
                    return invalid(format!("bad class name {:?}", class.fqn));
                }
                if !fqns.insert(&class.fqn) {
                    return invalid(format!("class {} declared twice", class.fqn));
                }
                if class.methods.is_empty() || class.methods.iter().any(|m| m.is_empty()) {
                    return invalid(format!("class {} needs non-empty method names", class.fqn));
                }
            }
            for route in &app.routes {
                if crate::span_model::parse_span_name(route).is_some() {
                    return invalid(format!("route {route:?} would parse as a code location"));
                }
            }
        }
        for (i, template) in self.call_templates.iter().enumerate() {
            let mut problem = None;
            template.root.walk(None, &mut |_, node| {
                if problem.is_none() {
                    problem = self.check_node(node).err();
                }
            });
            if let Some(p) = problem {
                return invalid(format!("template {i} ({}): {p}", template.name));
            }
        }
        Ok(())
    }

    fn check_node(&self, node: &CallNode) -> Result<(), String> {
        let app = self
            .app(&node.service)
            .ok_or_else(|| format!("undeclared service {:?}", node.service))?;
        if self.mode.uses_code_attributes() {
            let (_, _, method) = split_call(&node.call).ok_or_else(|| format!("bad call {:?}", node.call))?;
            let fqn = &node.call[..node.call.len() - method.len() - 1];
            let declared = app
                .classes
                .iter()
                .any(|c| c.fqn == fqn && c.methods.iter().any(|m| m == method));
            if !declared {
                return Err(format!("undeclared method {:?} in {}", node.call, node.service));
            }
        } else if !app.routes.iter().any(|r| r == &node.call) {
            return Err(format!("undeclared route {:?} in {}", node.call, node.service));
        }
        Ok(())
    }
}
