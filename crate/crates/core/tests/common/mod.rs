#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use spancity_core::api::{self, RunningServer, StatusReport};
use spancity_core::config::Config;
use spancity_core::landscape::{Landscape, Package};
use spancity_core::loadgen::{GroundTruth, Scenario, TruthEdge, TruthEndpoint};

/// Millisecond range that covers every fixture.
pub const ALL_FROM_MS: u64 = 0;
pub const ALL_TO_MS: u64 = 18_000_000_000_000;

pub fn fixture(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(format!("{name}.json"));
    Scenario::load(&path).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

/// Fast-completing configuration on ephemeral ports.
pub fn test_config(dir: Option<PathBuf>) -> Config {
    let mut c = Config::default();
    c.ingest.port = 0;
    c.api.port = 0;
    c.assembly.inactivity_timeout_ms = 300;
    c.pipeline.tick_ms = 20;
    c.store.dir = dir;
    c
}

pub async fn start(config: &Config) -> RunningServer {
    api::start(config, [127, 0, 0, 1]).await.expect("server starts")
}

pub fn base_url(server: &RunningServer) -> String {
    format!("http://{}", server.api_addr)
}

pub async fn get(url: &str) -> (u16, Vec<u8>) {
    let resp = reqwest::get(url).await.expect("request succeeds");
    let status = resp.status().as_u16();
    (status, resp.bytes().await.expect("body").to_vec())
}

pub async fn status(base: &str) -> StatusReport {
    let (code, body) = get(&format!("{base}/api/status")).await;
    assert_eq!(code, 200);
    serde_json::from_slice(&body).expect("status document")
}

pub async fn landscape_bytes(base: &str) -> Vec<u8> {
    let (code, body) = get(&format!("{base}/api/landscape?from={ALL_FROM_MS}&to={ALL_TO_MS}")).await;
    assert_eq!(code, 200);
    body
}

pub async fn layout_bytes(base: &str) -> Vec<u8> {
    let (code, body) = get(&format!("{base}/api/layout?from={ALL_FROM_MS}&to={ALL_TO_MS}")).await;
    assert_eq!(code, 200);
    body
}

pub async fn landscape(base: &str) -> Landscape {
    serde_json::from_slice(&landscape_bytes(base).await).expect("landscape document")
}

/// Waits until `received` spans arrived and everything has been folded.
pub async fn wait_settled(base: &str, received: u64, timeout: Duration) -> StatusReport {
    let deadline = Instant::now() + timeout;
    loop {
        let s = status(base).await;
        if s.counters.received_spans >= received && s.is_settled() {
            return s;
        }
        assert!(Instant::now() < deadline, "pipeline did not settle: {s:?}");
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
}

fn package_paths(prefix: &str, packages: &BTreeMap<String, Package>, out: &mut BTreeSet<String>) {
    for (name, p) in packages {
        let path = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}.{name}")
        };
        package_paths(&path, &p.packages, out);
        out.insert(path);
    }
}

/// Differences between a reconstructed landscape and the ground truth.
pub fn truth_mismatches(truth: &GroundTruth, landscape: &Landscape) -> Vec<String> {
    let mut problems = Vec::new();
    let expected_apps: BTreeSet<(String, Option<String>)> = truth
        .applications
        .iter()
        .map(|a| (a.service_name.clone(), a.instance_id.clone()))
        .collect();
    let actual_apps: BTreeSet<(String, Option<String>)> = landscape
        .applications
        .keys()
        .map(|k| (k.service_name.clone(), k.instance_id.clone()))
        .collect();
    if expected_apps != actual_apps {
        problems.push(format!("applications: expected {expected_apps:?}, got {actual_apps:?}"));
    }
    for expected in &truth.applications {
        let Some(app) = landscape
            .applications
            .iter()
            .find(|(k, _)| k.service_name == expected.service_name && k.instance_id == expected.instance_id)
            .map(|(_, a)| a)
        else {
            continue;
        };
        let mut packages = BTreeSet::new();
        package_paths("", &app.packages, &mut packages);
        if packages != expected.packages {
            problems.push(format!("{} packages differ", expected.service_name));
        }
        let mut classes = BTreeMap::new();
        app.visit_classes(&mut |c| {
            classes.insert(c.fqn.clone(), (c.methods.clone(), c.call_count));
        });
        let expected_classes: BTreeMap<_, _> = expected
            .classes
            .iter()
            .map(|c| (c.fqn.clone(), (c.methods.clone(), c.call_count)))
            .collect();
        if classes != expected_classes {
            problems.push(format!(
                "{} classes differ: expected {expected_classes:?}, got {classes:?}",
                expected.service_name
            ));
        }
        if !app.unresolved.is_empty() && expected.span_names.is_empty() {
            problems.push(format!("{} has unexpected unresolved names", expected.service_name));
        }
    }
    let endpoint = |e: &spancity_core::landscape::Endpoint| TruthEndpoint {
        service_name: e.app.service_name.clone(),
        instance_id: e.app.instance_id.clone(),
        class_fqn: e.class_fqn.clone(),
        method: e.method.clone(),
    };
    let mut edges: Vec<TruthEdge> = landscape
        .communication_edges()
        .map(|e| TruthEdge {
            caller: endpoint(&e.caller),
            callee: endpoint(&e.callee),
            call_count: e.call_count,
            cross_application: e.cross_application,
        })
        .collect();
    edges.sort_by(|a, b| (&a.caller, &a.callee).cmp(&(&b.caller, &b.callee)));
    if edges != truth.edges {
        problems.push(format!(
            "edges differ: expected {} edges, got {}",
            truth.edges.len(),
            edges.len()
        ));
    }
    problems
}

/// Resident set size of this process in KiB, when the platform reports it.
pub fn rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find(|l| l.starts_with("VmRSS:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}
