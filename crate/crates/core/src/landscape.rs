//! Static structure and aggregated communication reconstructed from traces.
//!
//! Applications own a package forest whose leaves are classes; classes own
//! method names. Calls between two located spans aggregate into
//! [`CommunicationEdge`]s. Spans without a code location are kept per
//! application as unresolved names, and calls touching them are parked in
//! `unresolved_edges` until [`crate::artificial`] gives them a home.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::assembly::TraceTree;
use crate::span_model::{extract_code_location, CodeLocation, ResourceInfo, SpanId};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AppKey {
    pub service_name: String,
    pub instance_id: Option<String>,
}

impl AppKey {
    pub fn new(service_name: impl Into<String>, instance_id: Option<&str>) -> Self {
        AppKey {
            service_name: service_name.into(),
            instance_id: instance_id.map(str::to_owned),
        }
    }

    pub fn of(resource: &ResourceInfo) -> Self {
        AppKey {
            service_name: resource.service_name.clone(),
            instance_id: resource.instance_id.clone(),
        }
    }

    /// `service` or `service#instance`.
    pub fn label(&self) -> String {
        match &self.instance_id {
            Some(id) => format!("{}#{}", self.service_name, id),
            None => self.service_name.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start_unix_nano: u64,
    pub end_unix_nano: u64,
}

impl TimeWindow {
    fn overlaps(&self, other: &TimeWindow) -> bool {
        self.start_unix_nano < other.end_unix_nano && other.start_unix_nano < self.end_unix_nano
    }

    fn hull(&self, other: &TimeWindow) -> TimeWindow {
        TimeWindow {
            start_unix_nano: self.start_unix_nano.min(other.start_unix_nano),
            end_unix_nano: self.end_unix_nano.max(other.end_unix_nano),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassEntity {
    pub name: String,
    pub fqn: String,
    pub methods: BTreeSet<String>,
    /// Executions of this class's methods.
    pub call_count: u64,
    pub synthetic: bool,
}

impl ClassEntity {
    fn absorb(&mut self, other: ClassEntity) {
        self.methods.extend(other.methods);
        self.call_count += other.call_count;
        self.synthetic |= other.synthetic;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Package {
    pub name: String,
    pub packages: BTreeMap<String, Package>,
    pub classes: BTreeMap<String, ClassEntity>,
    pub synthetic: bool,
}

impl Package {
    fn named(name: &str, synthetic: bool) -> Self {
        Package {
            name: name.to_owned(),
            synthetic,
            ..Default::default()
        }
    }

    fn absorb(&mut self, other: Package) {
        self.synthetic |= other.synthetic;
        merge_packages(&mut self.packages, other.packages);
        merge_classes(&mut self.classes, other.classes);
    }

    fn visit_classes<'a>(&'a self, f: &mut impl FnMut(&'a ClassEntity)) {
        self.classes.values().for_each(&mut *f);
        for p in self.packages.values() {
            p.visit_classes(f);
        }
    }
}

fn merge_packages(into: &mut BTreeMap<String, Package>, from: BTreeMap<String, Package>) {
    for (name, pkg) in from {
        match into.get_mut(&name) {
            Some(existing) => existing.absorb(pkg),
            None => {
                into.insert(name, pkg);
            }
        }
    }
}

fn merge_classes(into: &mut BTreeMap<String, ClassEntity>, from: BTreeMap<String, ClassEntity>) {
    for (name, class) in from {
        match into.get_mut(&name) {
            Some(existing) => existing.absorb(class),
            None => {
                into.insert(name, class);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Application {
    pub key: AppKey,
    pub packages: BTreeMap<String, Package>,
    /// Classes outside any package.
    pub classes: BTreeMap<String, ClassEntity>,
    /// Span names without a code location, with their execution counts.
    pub unresolved: BTreeMap<String, u64>,
    pub synthetic_structure: bool,
}

impl Application {
    pub fn new(key: AppKey) -> Self {
        Application {
            key,
            packages: BTreeMap::new(),
            classes: BTreeMap::new(),
            unresolved: BTreeMap::new(),
            synthetic_structure: false,
        }
    }

    /// Returns the class at `location`, creating packages and class on the way.
    pub fn class_mut(&mut self, location: &CodeLocation) -> &mut ClassEntity {
        let synthetic = location.synthetic;
        let classes = match location.package_path.split_first() {
            None => &mut self.classes,
            Some((first, rest)) => {
                let mut pkg = self
                    .packages
                    .entry(first.clone())
                    .or_insert_with(|| Package::named(first, synthetic));
                for segment in rest {
                    pkg = pkg
                        .packages
                        .entry(segment.clone())
                        .or_insert_with(|| Package::named(segment, synthetic));
                }
                &mut pkg.classes
            }
        };
        classes
            .entry(location.class_name.clone())
            .or_insert_with(|| ClassEntity {
                name: location.class_name.clone(),
                fqn: location.class_fqn(),
                synthetic,
                ..Default::default()
            })
    }

    pub fn visit_classes<'a>(&'a self, f: &mut impl FnMut(&'a ClassEntity)) {
        self.classes.values().for_each(&mut *f);
        for p in self.packages.values() {
            p.visit_classes(f);
        }
    }

    pub fn class_count(&self) -> usize {
        let mut n = 0;
        self.visit_classes(&mut |_| n += 1);
        n
    }

    fn absorb(&mut self, other: Application) {
        merge_packages(&mut self.packages, other.packages);
        merge_classes(&mut self.classes, other.classes);
        for (name, count) in other.unresolved {
            *self.unresolved.entry(name).or_default() += count;
        }
        self.synthetic_structure |= other.synthetic_structure;
    }
}

/// A located call site: application, class and method.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    #[serde(flatten)]
    pub app: AppKey,
    pub class_fqn: String,
    pub method: String,
}

/// One end of a call that may still lack a code location.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EdgeEnd {
    Located(Endpoint),
    Unresolved {
        #[serde(flatten)]
        app: AppKey,
        name: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunicationEdge {
    pub caller: Endpoint,
    pub callee: Endpoint,
    pub call_count: u64,
    pub cross_application: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LandscapeError {
    #[error("cannot merge overlapping windows {a:?} and {b:?}")]
    OverlappingWindows { a: TimeWindow, b: TimeWindow },
    #[error("invalid landscape document: {0}")]
    Document(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Landscape {
    pub window: Option<TimeWindow>,
    pub applications: BTreeMap<AppKey, Application>,
    pub edges: BTreeMap<(Endpoint, Endpoint), u64>,
    /// Calls with at least one unresolved end.
    pub unresolved_edges: BTreeMap<(EdgeEnd, EdgeEnd), u64>,
}

impl Landscape {
    pub fn new(window: TimeWindow) -> Self {
        Landscape {
            window: Some(window),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.applications.is_empty()
    }

    fn app_mut(&mut self, key: &AppKey) -> &mut Application {
        self.applications
            .entry(key.clone())
            .or_insert_with(|| Application::new(key.clone()))
    }

    /// Folds one trace into the structure and communication counts.
    pub fn fold_tree(&mut self, tree: &TraceTree) {
        let mut ends: HashMap<SpanId, EdgeEnd> = HashMap::with_capacity(tree.span_count);
        for span in tree.spans() {
            let key = AppKey::of(&span.resource);
            let end = match extract_code_location(span) {
                Some(loc) => {
                    let class = self.app_mut(&key).class_mut(&loc);
                    class.methods.insert(loc.method_name.clone());
                    class.call_count += 1;
                    EdgeEnd::Located(Endpoint {
                        class_fqn: class.fqn.clone(),
                        method: loc.method_name,
                        app: key,
                    })
                }
                None => {
                    *self
                        .app_mut(&key)
                        .unresolved
                        .entry(span.name.clone())
                        .or_default() += 1;
                    EdgeEnd::Unresolved {
                        app: key,
                        name: span.name.clone(),
                    }
                }
            };
            ends.insert(span.span_id, end);
        }
        for (parent, child) in tree.caller_callee_pairs() {
            self.record_call(&ends[&parent.span_id], &ends[&child.span_id], 1);
        }
    }

    pub fn fold_trees<'a>(&mut self, trees: impl IntoIterator<Item = &'a TraceTree>) {
        for tree in trees {
            self.fold_tree(tree);
        }
    }

    fn record_call(&mut self, caller: &EdgeEnd, callee: &EdgeEnd, count: u64) {
        match (caller, callee) {
            (EdgeEnd::Located(a), EdgeEnd::Located(b)) => {
                *self.edges.entry((a.clone(), b.clone())).or_default() += count;
            }
            _ => {
                *self
                    .unresolved_edges
                    .entry((caller.clone(), callee.clone()))
                    .or_default() += count;
            }
        }
    }

    /// Union of structure with added counts. Windows must be disjoint or equal.
    pub fn merge(mut self, other: Landscape) -> Result<Landscape, LandscapeError> {
        self.window = match (self.window, other.window) {
            (Some(a), Some(b)) if a != b && a.overlaps(&b) => {
                return Err(LandscapeError::OverlappingWindows { a, b });
            }
            (Some(a), Some(b)) => Some(a.hull(&b)),
            (a, b) => a.or(b),
        };
        for (key, app) in other.applications {
            match self.applications.get_mut(&key) {
                Some(existing) => existing.absorb(app),
                None => {
                    self.applications.insert(key, app);
                }
            }
        }
        for (k, n) in other.edges {
            *self.edges.entry(k).or_default() += n;
        }
        for (k, n) in other.unresolved_edges {
            *self.unresolved_edges.entry(k).or_default() += n;
        }
        Ok(self)
    }

    pub fn communication_edges(&self) -> impl Iterator<Item = CommunicationEdge> + '_ {
        self.edges.iter().map(|((caller, callee), n)| CommunicationEdge {
            cross_application: caller.app != callee.app,
            caller: caller.clone(),
            callee: callee.clone(),
            call_count: *n,
        })
    }

    pub fn class_count(&self) -> usize {
        self.applications.values().map(Application::class_count).sum()
    }

    /// Re-files parked calls whose ends can now be resolved through `lookup`.
    pub(crate) fn resolve_unresolved_edges(
        &mut self,
        lookup: impl Fn(&AppKey, &str) -> Option<Endpoint>,
    ) {
        let parked = std::mem::take(&mut self.unresolved_edges);
        for ((caller, callee), n) in parked {
            let resolve = |end: EdgeEnd| match end {
                EdgeEnd::Unresolved { app, name } => match lookup(&app, &name) {
                    Some(ep) => EdgeEnd::Located(ep),
                    None => EdgeEnd::Unresolved { app, name },
                },
                located => located,
            };
            self.record_call(&resolve(caller), &resolve(callee), n);
        }
    }
}

// ---------------------------------------------------------------------------
// Document form
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LandscapeDoc {
    window: Option<TimeWindow>,
    applications: Vec<ApplicationDoc>,
    edges: Vec<CommunicationEdge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    unresolved_edges: Vec<UnresolvedEdgeDoc>,
}

#[derive(Serialize, Deserialize)]
struct ApplicationDoc {
    service_name: String,
    instance_id: Option<String>,
    synthetic_structure: bool,
    packages: Vec<PackageDoc>,
    classes: Vec<ClassDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    unresolved_names: Vec<NameCount>,
}

#[derive(Serialize, Deserialize)]
struct PackageDoc {
    name: String,
    synthetic: bool,
    packages: Vec<PackageDoc>,
    classes: Vec<ClassDoc>,
}

#[derive(Serialize, Deserialize)]
struct ClassDoc {
    name: String,
    fqn: String,
    methods: Vec<String>,
    call_count: u64,
    synthetic: bool,
}

#[derive(Serialize, Deserialize)]
struct NameCount {
    name: String,
    count: u64,
}

#[derive(Serialize, Deserialize)]
struct UnresolvedEdgeDoc {
    caller: EdgeEnd,
    callee: EdgeEnd,
    call_count: u64,
}

impl From<&ClassEntity> for ClassDoc {
    fn from(c: &ClassEntity) -> Self {
        ClassDoc {
            name: c.name.clone(),
            fqn: c.fqn.clone(),
            methods: c.methods.iter().cloned().collect(),
            call_count: c.call_count,
            synthetic: c.synthetic,
        }
    }
}

impl From<&Package> for PackageDoc {
    fn from(p: &Package) -> Self {
        PackageDoc {
            name: p.name.clone(),
            synthetic: p.synthetic,
            packages: p.packages.values().map(PackageDoc::from).collect(),
            classes: p.classes.values().map(ClassDoc::from).collect(),
        }
    }
}

impl From<&Landscape> for LandscapeDoc {
    fn from(l: &Landscape) -> Self {
        LandscapeDoc {
            window: l.window,
            applications: l
                .applications
                .values()
                .map(|a| ApplicationDoc {
                    service_name: a.key.service_name.clone(),
                    instance_id: a.key.instance_id.clone(),
                    synthetic_structure: a.synthetic_structure,
                    packages: a.packages.values().map(PackageDoc::from).collect(),
                    classes: a.classes.values().map(ClassDoc::from).collect(),
                    unresolved_names: a
                        .unresolved
                        .iter()
                        .map(|(name, count)| NameCount {
                            name: name.clone(),
                            count: *count,
                        })
                        .collect(),
                })
                .collect(),
            edges: l.communication_edges().collect(),
            unresolved_edges: l
                .unresolved_edges
                .iter()
                .map(|((caller, callee), n)| UnresolvedEdgeDoc {
                    caller: caller.clone(),
                    callee: callee.clone(),
                    call_count: *n,
                })
                .collect(),
        }
    }
}

fn doc_err(msg: impl Into<String>) -> LandscapeError {
    LandscapeError::Document(msg.into())
}

fn class_from_doc(doc: ClassDoc) -> Result<(String, ClassEntity), LandscapeError> {
    if doc.methods.is_empty() {
        return Err(doc_err(format!("class {} has no methods", doc.fqn)));
    }
    let methods: BTreeSet<String> = doc.methods.into_iter().collect();
    Ok((
        doc.name.clone(),
        ClassEntity {
            name: doc.name,
            fqn: doc.fqn,
            methods,
            call_count: doc.call_count,
            synthetic: doc.synthetic,
        },
    ))
}

fn classes_from_doc(docs: Vec<ClassDoc>) -> Result<BTreeMap<String, ClassEntity>, LandscapeError> {
    let mut out = BTreeMap::new();
    for doc in docs {
        let (name, class) = class_from_doc(doc)?;
        if out.insert(name.clone(), class).is_some() {
            return Err(doc_err(format!("duplicate class {name}")));
        }
    }
    Ok(out)
}

fn packages_from_doc(docs: Vec<PackageDoc>) -> Result<BTreeMap<String, Package>, LandscapeError> {
    let mut out = BTreeMap::new();
    for doc in docs {
        let pkg = Package {
            name: doc.name.clone(),
            synthetic: doc.synthetic,
            packages: packages_from_doc(doc.packages)?,
            classes: classes_from_doc(doc.classes)?,
        };
        if out.insert(doc.name.clone(), pkg).is_some() {
            return Err(doc_err(format!("duplicate package {}", doc.name)));
        }
    }
    Ok(out)
}

impl TryFrom<LandscapeDoc> for Landscape {
    type Error = LandscapeError;

    fn try_from(doc: LandscapeDoc) -> Result<Self, Self::Error> {
        let mut landscape = Landscape {
            window: doc.window,
            ..Default::default()
        };
        for a in doc.applications {
            let key = AppKey {
                service_name: a.service_name,
                instance_id: a.instance_id,
            };
            let app = Application {
                key: key.clone(),
                packages: packages_from_doc(a.packages)?,
                classes: classes_from_doc(a.classes)?,
                unresolved: a.unresolved_names.into_iter().map(|n| (n.name, n.count)).collect(),
                synthetic_structure: a.synthetic_structure,
            };
            if landscape.applications.insert(key.clone(), app).is_some() {
                return Err(doc_err(format!("duplicate application {}", key.label())));
            }
        }
        for e in doc.edges {
            if e.call_count == 0 || e.cross_application != (e.caller.app != e.callee.app) {
                return Err(doc_err("inconsistent communication edge"));
            }
            *landscape.edges.entry((e.caller, e.callee)).or_default() += e.call_count;
        }
        for e in doc.unresolved_edges {
            *landscape
                .unresolved_edges
                .entry((e.caller, e.callee))
                .or_default() += e.call_count;
        }
        Ok(landscape)
    }
}

impl Serialize for Landscape {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        LandscapeDoc::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Landscape {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = LandscapeDoc::deserialize(deserializer)?;
        Landscape::try_from(doc).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::TraceTree;
    use crate::span_model::test_support::span;
    use crate::span_model::{SpanRecord, TraceId, ATTR_CODE_FUNCTION, ATTR_CODE_NAMESPACE};
    use std::sync::Arc;

    fn located(id: u8, parent: Option<u8>, service: &str, ns: &str, func: &str) -> SpanRecord {
        let mut s = span(3, id, parent, func);
        s.resource = Arc::new(ResourceInfo::new(service, None));
        s.attributes.insert(ATTR_CODE_NAMESPACE.into(), ns.into());
        s.attributes.insert(ATTR_CODE_FUNCTION.into(), func.into());
        s
    }

    fn tree(spans: Vec<SpanRecord>) -> TraceTree {
        TraceTree::assemble(TraceId([3; 16]), spans, 0)
    }

    fn window() -> TimeWindow {
        TimeWindow {
            start_unix_nano: 0,
            end_unix_nano: 10,
        }
    }

    #[test]
    fn single_span_builds_structure() {
        let mut l = Landscape::new(window());
        l.fold_tree(&tree(vec![located(1, None, "app", "org.a.B", "m")]));
        assert_eq!(l.applications.len(), 1);
        let app = &l.applications[&AppKey::new("app", None)];
        let class = &app.packages["org"].packages["a"].classes["B"];
        assert_eq!(class.fqn, "org.a.B");
        assert_eq!(class.methods.iter().collect::<Vec<_>>(), vec!["m"]);
        assert_eq!(class.call_count, 1);
        assert!(l.edges.is_empty());
    }

    #[test]
    fn folding_twice_doubles_counts_only() {
        let t = tree(vec![
            located(1, None, "gw", "org.Gw", "route"),
            located(2, Some(1), "vets", "org.v.Vets", "all"),
            located(3, Some(2), "vets", "org.v.Repo", "find"),
        ]);
        let mut once = Landscape::new(window());
        once.fold_tree(&t);
        let mut twice = once.clone();
        twice.fold_tree(&t);
        assert_eq!(once.applications.len(), twice.applications.len());
        assert_eq!(twice.edges.values().sum::<u64>(), 4);
        let edges: Vec<_> = twice.communication_edges().collect();
        assert_eq!(edges.iter().filter(|e| e.cross_application).count(), 1);
        assert_eq!(once.class_count(), twice.class_count());
    }

    #[test]
    fn half_resolved_pairs_are_parked() {
        let mut route = span(3, 1, None, "GET /vets");
        route.resource = Arc::new(ResourceInfo::new("vets", None));
        let mut l = Landscape::new(window());
        l.fold_tree(&tree(vec![route, located(2, Some(1), "vets", "org.Vets", "all")]));
        assert!(l.edges.is_empty());
        assert_eq!(l.unresolved_edges.len(), 1);
        let app = &l.applications[&AppKey::new("vets", None)];
        assert_eq!(app.unresolved["GET /vets"], 1);
        assert_eq!(app.class_count(), 1);
    }

    #[test]
    fn merge_identity_commutativity_and_overlap() {
        let mut a = Landscape::new(window());
        a.fold_tree(&tree(vec![located(1, None, "x", "p.A", "m")]));
        let mut b = Landscape::new(TimeWindow {
            start_unix_nano: 10,
            end_unix_nano: 20,
        });
        b.fold_tree(&tree(vec![
            located(1, None, "x", "p.A", "n"),
            located(2, Some(1), "y", "B", "k"),
        ]));
        assert_eq!(a.clone().merge(Landscape::default()).unwrap(), a);
        let ab = a.clone().merge(b.clone()).unwrap();
        assert_eq!(ab, b.clone().merge(a.clone()).unwrap());
        assert_eq!(
            ab.window,
            Some(TimeWindow {
                start_unix_nano: 0,
                end_unix_nano: 20
            })
        );
        assert_eq!(ab.applications[&AppKey::new("x", None)].packages["p"].classes["A"].call_count, 2);

        let overlapping = Landscape::new(TimeWindow {
            start_unix_nano: 5,
            end_unix_nano: 15,
        });
        assert!(matches!(
            a.merge(overlapping),
            Err(LandscapeError::OverlappingWindows { .. })
        ));
    }

    #[test]
    fn document_round_trip_and_empty_shape() {
        let mut route = span(3, 1, None, "GET /vets");
        route.resource = Arc::new(ResourceInfo::new("vets", Some("v-1")));
        let mut l = Landscape::new(window());
        l.fold_tree(&tree(vec![
            route,
            located(2, Some(1), "vets", "org.Vets", "all"),
            located(3, Some(2), "db", "Repo", "q"),
        ]));
        let json = serde_json::to_string(&l).unwrap();
        let back: Landscape = serde_json::from_str(&json).unwrap();
        assert_eq!(back, l);

        let empty = serde_json::to_value(Landscape::default()).unwrap();
        assert_eq!(empty["applications"], serde_json::json!([]));
    }

    #[test]
    fn inconsistent_documents_are_rejected() {
        let bad = r#"{"window":null,"applications":[],"edges":[{"caller":{"service_name":"a","instance_id":null,"class_fqn":"A","method":"m"},"callee":{"service_name":"a","instance_id":null,"class_fqn":"A","method":"m"},"call_count":1,"cross_application":true}]}"#;
        assert!(serde_json::from_str::<Landscape>(bad).is_err());
    }
}
