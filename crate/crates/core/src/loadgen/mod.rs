//! Synthetic OTLP workloads with an exact ground truth.
//!
//! Template choice and span identities come from two independent ChaCha8
//! streams of the scenario seed, so the ground truth only has to replay the
//! template choices. It is computed from the template trees, never from the
//! generated spans.

mod scenario;
mod send;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use scenario::{split_call, AppSpec, CallNode, CallTemplate, ClassSpec, Mode, Scenario, ScenarioError};
pub use send::{send, target_url, SendOptions, SendReport};

use crate::ingest::otlp;
use crate::span_model::{
    AttrValue, Attributes, ResourceInfo, SpanId, SpanRecord, TraceId, ATTR_CODE_FUNCTION,
    ATTR_CODE_NAMESPACE,
};

pub const MAX_BATCH_SPANS: usize = 512;

const CHOICE_STREAM: u64 = 0;
const IDENTITY_STREAM: u64 = 1;
const SELF_TIME_NANO: u64 = 10_000;
const MAX_JITTER_NANO: u64 = 5_000;
const CALL_GAP_NANO: u64 = 1_000;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn template_picker(scenario: &Scenario) -> Option<WeightedIndex<u32>> {
    WeightedIndex::new(scenario.call_templates.iter().map(|t| t.weight)).ok()
}

/// Template index of every trace, warm-up traces included.
pub fn template_choices(scenario: &Scenario) -> impl Iterator<Item = usize> + '_ {
    let picker = template_picker(scenario);
    let mut r = rng(scenario.seed, CHOICE_STREAM);
    (0..scenario.trace_count).map(move |_| {
        picker
            .as_ref()
            .expect("validated scenarios with traces have a positive weight")
            .sample(&mut r)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTrace {
    pub index: u64,
    pub template: usize,
    /// Falls inside the warm-up gap and is not emitted.
    pub suppressed: bool,
    pub spans: Vec<SpanRecord>,
}

/// Streams every trace of a scenario in order.
pub struct Generator<'a> {
    scenario: &'a Scenario,
    choices: Box<dyn Iterator<Item = usize> + 'a>,
    ids: ChaCha8Rng,
    resources: BTreeMap<String, Arc<ResourceInfo>>,
    next: u64,
}

impl<'a> Generator<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        let resources = scenario
            .applications
            .iter()
            .map(|a| {
                let key = match &a.instance_id {
                    Some(i) => format!("{}#{}", a.service_name, i),
                    None => a.service_name.clone(),
                };
                (key, Arc::new(ResourceInfo::new(&a.service_name, a.instance_id.as_deref())))
            })
            .collect();
        Generator {
            scenario,
            choices: Box::new(template_choices(scenario)),
            ids: rng(scenario.seed, IDENTITY_STREAM),
            resources,
            next: 0,
        }
    }

    /// Spans of emitted traces only, in export batches of at most `max` spans.
    pub fn batches(self, max: usize) -> impl Iterator<Item = Vec<SpanRecord>> + 'a {
        let max = max.max(1);
        let mut spans = self.filter(|t| !t.suppressed).flat_map(|t| t.spans).peekable();
        std::iter::from_fn(move || {
            spans.peek()?;
            Some(spans.by_ref().take(max).collect())
        })
    }

    fn span_id(&mut self, used: &mut HashSet<u64>) -> SpanId {
        loop {
            let v: u64 = self.ids.random();
            if v != 0 && used.insert(v) {
                return SpanId(v.to_be_bytes());
            }
        }
    }

    fn build(
        &mut self,
        node: &CallNode,
        trace_id: TraceId,
        parent: Option<SpanId>,
        start: u64,
        used: &mut HashSet<u64>,
        out: &mut Vec<SpanRecord>,
    ) -> u64 {
        let span_id = self.span_id(used);
        let slot = out.len();
        out.push(SpanRecord {
            trace_id,
            span_id,
            parent_span_id: parent,
            name: String::new(),
            start_unix_nano: start,
            end_unix_nano: start,
            attributes: Attributes::new(),
            resource: Arc::clone(&self.resources[&node.service]),
        });
        let mut cursor = start + CALL_GAP_NANO;
        for child in &node.children {
            cursor = self.build(child, trace_id, Some(span_id), cursor, used, out) + CALL_GAP_NANO;
        }
        let end = cursor + SELF_TIME_NANO + self.ids.random_range(0..MAX_JITTER_NANO);
        let span = &mut out[slot];
        span.end_unix_nano = end;
        if self.scenario.mode.uses_code_attributes() {
            let (_, class, method) = split_call(&node.call).expect("validated call");
            let fqn = &node.call[..node.call.len() - method.len() - 1];
            span.name = format!("{class}.{method}");
            span.attributes
                .insert(ATTR_CODE_NAMESPACE.into(), AttrValue::Str(fqn.into()));
            span.attributes
                .insert(ATTR_CODE_FUNCTION.into(), AttrValue::Str(method.into()));
        } else {
            span.name = node.call.clone();
        }
        end
    }
}

impl Iterator for Generator<'_> {
    type Item = GeneratedTrace;

    fn next(&mut self) -> Option<GeneratedTrace> {
        let template = self.choices.next()?;
        let index = self.next;
        self.next += 1;
        let mut trace = [0u8; 16];
        while trace == [0u8; 16] {
            self.ids.fill(&mut trace);
        }
        let start = self.scenario.start_unix_nano + index * self.scenario.trace_interval_nano;
        let root = &self.scenario.call_templates[template].root;
        let mut spans = Vec::with_capacity(root.node_count() as usize);
        let mut used = HashSet::new();
        self.build(root, TraceId(trace), None, start, &mut used, &mut spans);
        Some(GeneratedTrace {
            index,
            template,
            suppressed: index < self.scenario.warmup_skip_traces,
            spans,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TruthEndpoint {
    pub service_name: String,
    pub instance_id: Option<String>,
    pub class_fqn: String,
    pub method: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEdge {
    pub caller: TruthEndpoint,
    pub callee: TruthEndpoint,
    pub call_count: u64,
    pub cross_application: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthClass {
    pub fqn: String,
    pub methods: BTreeSet<String>,
    pub call_count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthApplication {
    pub service_name: String,
    pub instance_id: Option<String>,
    /// Every package as a dotted path, ancestors included.
    pub packages: BTreeSet<String>,
    pub classes: Vec<TruthClass>,
    /// Span names without code attributes and their execution counts.
    pub span_names: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: String,
    pub mode: Mode,
    pub traces_total: u64,
    pub traces_emitted: u64,
    pub traces_suppressed: u64,
    pub spans_total: u64,
    pub spans_emitted: u64,
    pub spans_suppressed: u64,
    /// Structure and edges of the emitted traces.
    pub applications: Vec<TruthApplication>,
    pub edges: Vec<TruthEdge>,
}

type AppId = (String, Option<String>);

fn app_id(scenario: &Scenario, service: &str) -> AppId {
    let app = scenario.app(service).expect("validated service");
    (app.service_name.clone(), app.instance_id.clone())
}

pub fn ground_truth(scenario: &Scenario) -> GroundTruth {
    let per_template = scenario.spans_per_template();
    let mut emitted_by_template = vec![0u64; scenario.call_templates.len()];
    let (mut spans_emitted, mut spans_suppressed) = (0u64, 0u64);
    for (i, t) in template_choices(scenario).enumerate() {
        if (i as u64) < scenario.warmup_skip_traces {
            spans_suppressed += per_template[t];
        } else {
            spans_emitted += per_template[t];
            emitted_by_template[t] += 1;
        }
    }

    let mut classes: BTreeMap<AppId, BTreeMap<String, (BTreeSet<String>, u64)>> = BTreeMap::new();
    let mut names: BTreeMap<AppId, BTreeMap<String, u64>> = BTreeMap::new();
    let mut edges: BTreeMap<(TruthEndpoint, TruthEndpoint), u64> = BTreeMap::new();
    let located = scenario.mode.uses_code_attributes();
    let endpoint = |node: &CallNode| {
        let (service_name, instance_id) = app_id(scenario, &node.service);
        let (fqn, method) = node.call.rsplit_once('#').expect("validated call");
        TruthEndpoint {
            service_name,
            instance_id,
            class_fqn: fqn.into(),
            method: method.into(),
        }
    };
    for (template, &n) in scenario.call_templates.iter().zip(&emitted_by_template) {
        if n == 0 {
            continue;
        }
        template.root.walk(None, &mut |parent, node| {
            let app = app_id(scenario, &node.service);
            if located {
                let ep = endpoint(node);
                let entry = classes.entry(app).or_default().entry(ep.class_fqn).or_default();
                entry.0.insert(ep.method);
                entry.1 += n;
                if let Some(p) = parent {
                    *edges.entry((endpoint(p), endpoint(node))).or_default() += n;
                }
            } else {
                classes.entry(app.clone()).or_default();
                *names.entry(app).or_default().entry(node.call.clone()).or_default() += n;
            }
        });
    }

    let applications = classes
        .into_iter()
        .map(|(id, classes)| {
            let mut packages = BTreeSet::new();
            for fqn in classes.keys() {
                let segments: Vec<&str> = fqn.split('.').collect();
                for depth in 1..segments.len() {
                    packages.insert(segments[..depth].join("."));
                }
            }
            TruthApplication {
                span_names: names.remove(&id).unwrap_or_default(),
                service_name: id.0,
                instance_id: id.1,
                packages,
                classes: classes
                    .into_iter()
                    .map(|(fqn, (methods, call_count))| TruthClass {
                        fqn,
                        methods,
                        call_count,
                    })
                    .collect(),
            }
        })
        .collect();
    let traces_suppressed = scenario.warmup_skip_traces;
    GroundTruth {
        scenario: scenario.name.clone(),
        mode: scenario.mode,
        traces_total: scenario.trace_count,
        traces_emitted: scenario.trace_count - traces_suppressed,
        traces_suppressed,
        spans_total: spans_emitted + spans_suppressed,
        spans_emitted,
        spans_suppressed,
        applications,
        edges: edges
            .into_iter()
            .map(|((caller, callee), call_count)| TruthEdge {
                cross_application: (&caller.service_name, &caller.instance_id)
                    != (&callee.service_name, &callee.instance_id),
                caller,
                callee,
                call_count,
            })
            .collect(),
    }
}

/// Writes one OTLP/JSON export request per line. Returns the span count.
pub fn write_stream(scenario: &Scenario, mut out: impl Write) -> std::io::Result<u64> {
    let mut spans = 0;
    for batch in Generator::new(scenario).batches(MAX_BATCH_SPANS) {
        spans += batch.len() as u64;
        out.write_all(&otlp::encode_json(&batch))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(spans)
}
