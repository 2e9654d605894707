//! Canonical span representation shared by every pipeline stage.
//!
//! Wire decoding lives in [`crate::ingest`]; this module only knows about the
//! decoded shape and the handful of semantic-convention attributes the
//! landscape reconstruction consumes.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub const ATTR_SERVICE_NAME: &str = "service.name";
pub const ATTR_SERVICE_INSTANCE_ID: &str = "service.instance.id";
pub const ATTR_CODE_NAMESPACE: &str = "code.namespace";
pub const ATTR_CODE_FUNCTION: &str = "code.function";

/// Service name used when a resource carries no `service.name`.
pub const UNKNOWN_SERVICE: &str = "unknown_service";

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TraceId(pub [u8; 16]);

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SpanId(pub [u8; 8]);

macro_rules! hex_id {
    ($ty:ident, $len:expr) => {
        impl $ty {
            pub const LEN: usize = $len;

            pub fn is_zero(&self) -> bool {
                self.0.iter().all(|b| *b == 0)
            }

            pub fn from_slice(bytes: &[u8]) -> Option<Self> {
                <[u8; $len]>::try_from(bytes).ok().map(Self)
            }

            pub fn from_hex(s: &str) -> Option<Self> {
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out).ok()?;
                Some(Self(out))
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl fmt::Debug for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($ty), self.to_hex())
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }
    };
}

hex_id!(TraceId, 16);
hex_id!(SpanId, 8);

/// Scalar attribute value. Array and map values are dropped during decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrValue {
    Str(String),
    Int(i64),
    Double(f64),
    Bool(bool),
}

impl AttrValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttrValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl From<&str> for AttrValue {
    fn from(s: &str) -> Self {
        AttrValue::Str(s.to_owned())
    }
}

impl From<String> for AttrValue {
    fn from(s: String) -> Self {
        AttrValue::Str(s)
    }
}

pub type Attributes = BTreeMap<String, AttrValue>;

/// Identity of the process that produced a span.
#[derive(Clone, Debug, PartialEq)]
pub struct ResourceInfo {
    pub service_name: String,
    pub instance_id: Option<String>,
    pub raw: Attributes,
}

impl ResourceInfo {
    /// Builds resource info from raw resource attributes, falling back to
    /// [`UNKNOWN_SERVICE`] when `service.name` is missing or empty.
    pub fn from_attributes(raw: Attributes) -> Self {
        let service_name = raw
            .get(ATTR_SERVICE_NAME)
            .and_then(AttrValue::as_str)
            .filter(|s| !s.is_empty())
            .unwrap_or(UNKNOWN_SERVICE)
            .to_owned();
        let instance_id = raw
            .get(ATTR_SERVICE_INSTANCE_ID)
            .and_then(AttrValue::as_str)
            .map(str::to_owned);
        ResourceInfo {
            service_name,
            instance_id,
            raw,
        }
    }

    pub fn new(service_name: &str, instance_id: Option<&str>) -> Self {
        let mut raw = Attributes::new();
        raw.insert(ATTR_SERVICE_NAME.into(), service_name.into());
        if let Some(id) = instance_id {
            raw.insert(ATTR_SERVICE_INSTANCE_ID.into(), id.into());
        }
        Self::from_attributes(raw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanRecord {
    pub trace_id: TraceId,
    pub span_id: SpanId,
    pub parent_span_id: Option<SpanId>,
    pub name: String,
    pub start_unix_nano: u64,
    pub end_unix_nano: u64,
    pub attributes: Attributes,
    /// Shared by every span of the same resource block.
    pub resource: Arc<ResourceInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeLocation {
    pub package_path: Vec<String>,
    pub class_name: String,
    pub method_name: String,
    pub synthetic: bool,
}

impl CodeLocation {
    /// Fully qualified class name, `a.b.Class`.
    pub fn class_fqn(&self) -> String {
        let mut fqn = String::new();
        for segment in &self.package_path {
            fqn.push_str(segment);
            fqn.push('.');
        }
        fqn.push_str(&self.class_name);
        fqn
    }
}

/// Why [`validate`] refused a span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    ZeroId,
    NegativeDuration,
    SelfParent,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rejection::ZeroId => "zero_id",
            Rejection::NegativeDuration => "negative_duration",
            Rejection::SelfParent => "self_parent",
        })
    }
}

pub fn validate(span: &SpanRecord) -> Result<(), Rejection> {
    if span.trace_id.is_zero() || span.span_id.is_zero() {
        return Err(Rejection::ZeroId);
    }
    if span.end_unix_nano < span.start_unix_nano {
        return Err(Rejection::NegativeDuration);
    }
    if span.parent_span_id == Some(span.span_id) {
        return Err(Rejection::SelfParent);
    }
    Ok(())
}

/// Derives the source location of a span.
///
/// `code.namespace` + `code.function` win when both are present. Otherwise the
/// span name is parsed as `pkg.Class.method`, which requires at least two
/// segments and an uppercase penultimate segment so that HTTP route names such
/// as `GET /owners` never turn into packages.
pub fn extract_code_location(span: &SpanRecord) -> Option<CodeLocation> {
    let namespace = span
        .attributes
        .get(ATTR_CODE_NAMESPACE)
        .and_then(AttrValue::as_str);
    let function = span
        .attributes
        .get(ATTR_CODE_FUNCTION)
        .and_then(AttrValue::as_str);
    if let (Some(ns), Some(func)) = (namespace, function) {
        if let Some(loc) = from_namespace(ns, func) {
            return Some(loc);
        }
    }
    parse_span_name(&span.name)
}

fn from_namespace(namespace: &str, function: &str) -> Option<CodeLocation> {
    if function.is_empty() {
        return None;
    }
    let mut segments: Vec<&str> = namespace.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return None;
    }
    let class_name = segments.pop()?;
    Some(CodeLocation {
        package_path: segments.into_iter().map(str::to_owned).collect(),
        class_name: class_name.to_owned(),
        method_name: function.to_owned(),
        synthetic: false,
    })
}

fn is_name_segment(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_alphanumeric() || c == '_' || c == '$')
}

/// Parses `pkg.Class.method` span names; see [`extract_code_location`].
pub fn parse_span_name(name: &str) -> Option<CodeLocation> {
    let mut segments: Vec<&str> = name.split('.').collect();
    if segments.len() < 2 || !segments.iter().all(|s| is_name_segment(s)) {
        return None;
    }
    let method = segments.pop()?;
    let class_name = segments.pop()?;
    if !class_name.chars().next().is_some_and(char::is_uppercase) {
        return None;
    }
    Some(CodeLocation {
        package_path: segments.into_iter().map(str::to_owned).collect(),
        class_name: class_name.to_owned(),
        method_name: method.to_owned(),
        synthetic: false,
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn span(trace: u8, id: u8, parent: Option<u8>, name: &str) -> SpanRecord {
        SpanRecord {
            trace_id: TraceId([trace; 16]),
            span_id: SpanId([id; 8]),
            parent_span_id: parent.map(|p| SpanId([p; 8])),
            name: name.to_owned(),
            start_unix_nano: 1_000 + id as u64,
            end_unix_nano: 2_000 + id as u64,
            attributes: Attributes::new(),
            resource: Arc::new(ResourceInfo::new("svc", None)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::span;
    use super::*;
    use proptest::prelude::*;

    fn with_code(ns: &str, func: &str) -> SpanRecord {
        let mut s = span(1, 1, None, "whatever");
        s.attributes.insert(ATTR_CODE_NAMESPACE.into(), ns.into());
        s.attributes.insert(ATTR_CODE_FUNCTION.into(), func.into());
        s
    }

    #[test]
    fn namespace_is_split_into_packages_and_class() {
        let loc = extract_code_location(&with_code("org.petclinic.vets.VetService", "findAll"))
            .unwrap();
        assert_eq!(loc.package_path, vec!["org", "petclinic", "vets"]);
        assert_eq!(loc.class_name, "VetService");
        assert_eq!(loc.method_name, "findAll");
        assert!(!loc.synthetic);
    }

    #[test]
    fn single_segment_namespace_has_empty_package_path() {
        let loc = extract_code_location(&with_code("Main", "run")).unwrap();
        assert!(loc.package_path.is_empty());
        assert_eq!(loc.class_name, "Main");
        assert_eq!(loc.method_name, "run");
    }

    #[test]
    fn http_route_names_have_no_location() {
        assert_eq!(extract_code_location(&span(1, 1, None, "GET /owners")), None);
        assert_eq!(extract_code_location(&span(1, 1, None, "db.query")), None);
        assert_eq!(extract_code_location(&span(1, 1, None, "")), None);
    }

    #[test]
    fn span_name_fallback_needs_uppercase_class() {
        let loc = extract_code_location(&span(1, 1, None, "org.shop.CartService.add")).unwrap();
        assert_eq!(loc.package_path, vec!["org", "shop"]);
        assert_eq!(loc.class_name, "CartService");
        assert_eq!(loc.method_name, "add");
        let loc = extract_code_location(&span(1, 1, None, "Cart.add")).unwrap();
        assert!(loc.package_path.is_empty());
    }

    #[test]
    fn legacy_code_ns_key_is_ignored() {
        let mut s = span(1, 1, None, "GET /x");
        s.attributes.insert("code.ns".into(), "a.B".into());
        s.attributes.insert(ATTR_CODE_FUNCTION.into(), "m".into());
        assert_eq!(extract_code_location(&s), None);
    }

    #[test]
    fn validate_reason_codes() {
        let mut s = span(1, 2, Some(1), "x");
        assert_eq!(validate(&s), Ok(()));
        s.end_unix_nano = s.start_unix_nano - 1;
        assert_eq!(validate(&s), Err(Rejection::NegativeDuration));
        let s = span(1, 2, Some(2), "x");
        assert_eq!(validate(&s), Err(Rejection::SelfParent));
        let s = span(0, 2, None, "x");
        assert_eq!(validate(&s), Err(Rejection::ZeroId));
        let s = span(1, 0, None, "x");
        assert_eq!(validate(&s), Err(Rejection::ZeroId));
    }

    #[test]
    fn resource_falls_back_to_unknown_service() {
        let r = ResourceInfo::from_attributes(Attributes::new());
        assert_eq!(r.service_name, UNKNOWN_SERVICE);
        assert_eq!(r.instance_id, None);
    }

    proptest! {
        #[test]
        fn namespace_round_trips(
            segs in prop::collection::vec("[a-zA-Z_][a-zA-Z0-9_]{0,8}", 1..6),
            func in "[a-z][a-zA-Z0-9]{0,8}",
        ) {
            let ns = segs.join(".");
            let loc = extract_code_location(&with_code(&ns, &func)).unwrap();
            prop_assert_eq!(loc.class_fqn(), ns);
            prop_assert_eq!(&loc.method_name, &func);
            prop_assert!(loc.package_path.iter().all(|s| !s.contains('.')));
            let again = extract_code_location(&with_code(&segs.join("."), &func)).unwrap();
            prop_assert_eq!(loc, again);
        }

        #[test]
        fn validate_matches_invariants(
            trace in any::<[u8; 16]>(),
            id in any::<[u8; 8]>(),
            parent in prop::option::of(any::<[u8; 8]>()),
            same_parent in any::<bool>(),
            start in 0u64..1_000,
            end in 0u64..1_000,
        ) {
            let mut s = span(1, 1, None, "x");
            s.trace_id = TraceId(trace);
            s.span_id = SpanId(id);
            s.parent_span_id = if same_parent { Some(SpanId(id)) } else { parent.map(SpanId) };
            s.start_unix_nano = start;
            s.end_unix_nano = end;
            let ok = !s.trace_id.is_zero()
                && !s.span_id.is_zero()
                && end >= start
                && s.parent_span_id != Some(s.span_id);
            prop_assert_eq!(validate(&s).is_ok(), ok);
        }
    }
}
