//! Synthetic package/class hierarchy for spans that carry no code location.
//!
//! Names are tokenized, then grouped by a greedy first-fit pass over the
//! lexicographically sorted names: a name joins the first cluster whose
//! token set has Jaccard similarity at least `threshold` with its own.

use std::collections::{BTreeMap, BTreeSet};

use crate::landscape::{AppKey, Application, Endpoint, Landscape};
use crate::span_model::CodeLocation;

pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.5;

/// Root package that holds all synthetic structure of an application.
pub const SYNTHETIC_ROOT: &str = "synthetic";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NameCluster {
    pub label: String,
    pub members: BTreeSet<String>,
    pub token_set: BTreeSet<String>,
}

/// Splits on non-alphanumeric characters, lowercases, and drops empty and
/// purely numeric tokens.
pub fn tokenize(name: &str) -> Vec<String> {
    name.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !t.chars().all(|c| c.is_numeric()))
        .map(str::to_lowercase)
        .collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        // Two token-less names are indistinguishable.
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

struct Draft {
    members: Vec<String>,
    token_set: BTreeSet<String>,
    token_freq: BTreeMap<String, usize>,
}

/// Greedy first-fit clustering. The comparison is against the cluster's
/// accumulated token set.
pub fn cluster_names<'a>(names: impl IntoIterator<Item = &'a str>, threshold: f64) -> Vec<NameCluster> {
    let sorted: BTreeSet<&str> = names.into_iter().collect();
    let mut clusters: Vec<Draft> = Vec::new();
    for name in sorted {
        let tokens = tokenize(name);
        let set: BTreeSet<String> = tokens.iter().cloned().collect();
        let idx = match clusters
            .iter()
            .position(|c| jaccard(&c.token_set, &set) >= threshold)
        {
            Some(i) => i,
            None => {
                clusters.push(Draft {
                    members: Vec::new(),
                    token_set: BTreeSet::new(),
                    token_freq: BTreeMap::new(),
                });
                clusters.len() - 1
            }
        };
        let c = &mut clusters[idx];
        c.members.push(name.to_owned());
        // Frequency counts each token once per member name.
        for t in &set {
            *c.token_freq.entry(t.clone()).or_default() += 1;
        }
        c.token_set.extend(set);
    }
    clusters
        .into_iter()
        .map(|c| {
            // Most frequent token; BTreeMap order breaks ties toward the
            // lexicographically smallest.
            let label = c
                .token_freq
                .iter()
                .fold(None::<(&String, usize)>, |best, (t, n)| match best {
                    Some((_, bn)) if bn >= *n => best,
                    _ => Some((t, *n)),
                })
                .map(|(t, _)| t.clone())
                .unwrap_or_else(|| "unnamed".to_owned());
            NameCluster {
                label,
                members: c.members.into_iter().collect(),
                token_set: c.token_set,
            }
        })
        .collect()
}

fn upper_camel(label: &str) -> String {
    let mut chars = label.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => "Unnamed".to_owned(),
    }
}

fn unique_name(base: &str, taken: &impl Fn(&str) -> bool) -> String {
    if !taken(base) {
        return base.to_owned();
    }
    (2..)
        .map(|i| format!("{base}{i}"))
        .find(|candidate| !taken(candidate))
        .expect("unbounded suffix search")
}

/// Adds one synthetic package and class per cluster under the
/// `synthetic` root package and empties the unresolved-name list.
///
/// Returns the extended application and, for every absorbed span name, the
/// location it now resolves to.
pub fn synthesize_structure(
    mut app: Application,
    clusters: &[NameCluster],
) -> (Application, BTreeMap<String, CodeLocation>) {
    let mut mapping = BTreeMap::new();
    if app.unresolved.is_empty() {
        return (app, mapping);
    }
    let root = match app.packages.get(SYNTHETIC_ROOT) {
        Some(p) if !p.synthetic => unique_name(SYNTHETIC_ROOT, &|n| app.packages.contains_key(n)),
        _ => SYNTHETIC_ROOT.to_owned(),
    };

    for cluster in clusters {
        let existing = app.packages.get(&root);
        let package = unique_name(&cluster.label, &|n| {
            existing.is_some_and(|p| p.packages.contains_key(n))
        });
        let class_name = upper_camel(&cluster.label);
        for member in &cluster.members {
            let Some(count) = app.unresolved.remove(member) else {
                continue;
            };
            let location = CodeLocation {
                package_path: vec![root.clone(), package.clone()],
                class_name: class_name.clone(),
                method_name: member.clone(),
                synthetic: true,
            };
            let class = app.class_mut(&location);
            class.methods.insert(member.clone());
            class.call_count += count;
            mapping.insert(member.clone(), location);
        }
    }
    // Names not covered by any cluster still need a home.
    if !app.unresolved.is_empty() {
        let leftovers: Vec<String> = app.unresolved.keys().cloned().collect();
        let extra = cluster_names(leftovers.iter().map(String::as_str), DEFAULT_JACCARD_THRESHOLD);
        let (next, more) = synthesize_structure(app, &extra);
        app = next;
        mapping.extend(more);
    }
    app.synthetic_structure = true;
    (app, mapping)
}

/// Gives every application with unresolved names a synthetic structure and
/// re-files the parked calls against the synthetic classes.
pub fn synthesize_landscape(mut landscape: Landscape, threshold: f64) -> Landscape {
    let mut mappings: BTreeMap<AppKey, BTreeMap<String, CodeLocation>> = BTreeMap::new();
    let keys: Vec<AppKey> = landscape.applications.keys().cloned().collect();
    for key in keys {
        let app = landscape.applications.remove(&key).expect("key from map");
        if app.unresolved.is_empty() {
            landscape.applications.insert(key, app);
            continue;
        }
        let clusters = cluster_names(app.unresolved.keys().map(String::as_str), threshold);
        let (app, mapping) = synthesize_structure(app, &clusters);
        landscape.applications.insert(key.clone(), app);
        mappings.insert(key, mapping);
    }
    landscape.resolve_unresolved_edges(|app, name| {
        let loc = mappings.get(app)?.get(name)?;
        Some(Endpoint {
            app: app.clone(),
            class_fqn: loc.class_fqn(),
            method: loc.method_name.clone(),
        })
    });
    landscape
}
