//! OTLP `ExportTraceServiceRequest` decoding and encoding.
//!
//! Protobuf uses the generated `opentelemetry-proto` messages. The JSON
//! encoding has its own serde types because OTLP/JSON differs from a plain
//! serde mapping of the protobuf messages: ids are lowercase hex, 64-bit
//! integers are decimal strings and field names are lowerCamelCase.

use std::sync::Arc;

use opentelemetry_proto::tonic::collector::trace::v1::ExportTraceServiceRequest;
use opentelemetry_proto::tonic::common::v1::{any_value, AnyValue, KeyValue};
use opentelemetry_proto::tonic::resource::v1::Resource;
use opentelemetry_proto::tonic::trace::v1::{ResourceSpans, ScopeSpans, Span};
use prost::Message;
use serde::{Deserialize, Serialize};

use crate::span_model::{AttrValue, Attributes, ResourceInfo, SpanId, SpanRecord, TraceId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Protobuf,
    Json,
}

impl Encoding {
    pub fn content_type(self) -> &'static str {
        match self {
            Encoding::Protobuf => "application/x-protobuf",
            Encoding::Json => "application/json",
        }
    }

    /// Maps a `Content-Type` header value, ignoring parameters like charset.
    pub fn from_content_type(value: &str) -> Option<Self> {
        let mime = value.split(';').next()?.trim();
        match mime {
            "application/x-protobuf" | "application/protobuf" => Some(Encoding::Protobuf),
            "application/json" => Some(Encoding::Json),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid protobuf payload: {0}")]
    Protobuf(#[from] prost::DecodeError),
    #[error("invalid OTLP/JSON payload: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid {field}: {value:?}")]
    Field { field: &'static str, value: String },
}

fn field_err(field: &'static str, value: impl Into<String>) -> DecodeError {
    DecodeError::Field {
        field,
        value: value.into(),
    }
}

pub fn decode(body: &[u8], encoding: Encoding) -> Result<Vec<SpanRecord>, DecodeError> {
    match encoding {
        Encoding::Protobuf => decode_protobuf(body),
        Encoding::Json => decode_json(body),
    }
}

pub fn encode(spans: &[SpanRecord], encoding: Encoding) -> Vec<u8> {
    match encoding {
        Encoding::Protobuf => encode_protobuf(spans),
        Encoding::Json => encode_json(spans),
    }
}

// ---------------------------------------------------------------------------
// Protobuf
// ---------------------------------------------------------------------------

pub fn decode_protobuf(body: &[u8]) -> Result<Vec<SpanRecord>, DecodeError> {
    let request = ExportTraceServiceRequest::decode(body)?;
    let mut out = Vec::new();
    for rs in request.resource_spans {
        let raw = rs
            .resource
            .map(|r| proto_attributes(&r.attributes))
            .unwrap_or_default();
        let resource = Arc::new(ResourceInfo::from_attributes(raw));
        for ss in rs.scope_spans {
            for span in ss.spans {
                out.push(proto_span(span, &resource)?);
            }
        }
    }
    Ok(out)
}

fn proto_span(span: Span, resource: &Arc<ResourceInfo>) -> Result<SpanRecord, DecodeError> {
    let trace_id = TraceId::from_slice(&span.trace_id)
        .ok_or_else(|| field_err("traceId", hex::encode(&span.trace_id)))?;
    let span_id = SpanId::from_slice(&span.span_id)
        .ok_or_else(|| field_err("spanId", hex::encode(&span.span_id)))?;
    let parent_span_id = if span.parent_span_id.is_empty() {
        None
    } else {
        Some(
            SpanId::from_slice(&span.parent_span_id)
                .ok_or_else(|| field_err("parentSpanId", hex::encode(&span.parent_span_id)))?,
        )
    };
    Ok(SpanRecord {
        trace_id,
        span_id,
        parent_span_id,
        name: span.name,
        start_unix_nano: span.start_time_unix_nano,
        end_unix_nano: span.end_time_unix_nano,
        attributes: proto_attributes(&span.attributes),
        resource: Arc::clone(resource),
    })
}

fn proto_attributes(kvs: &[KeyValue]) -> Attributes {
    kvs.iter()
        .filter_map(|kv| {
            let value = match kv.value.as_ref()?.value.as_ref()? {
                any_value::Value::StringValue(s) => AttrValue::Str(s.clone()),
                any_value::Value::IntValue(i) => AttrValue::Int(*i),
                any_value::Value::DoubleValue(d) => AttrValue::Double(*d),
                any_value::Value::BoolValue(b) => AttrValue::Bool(*b),
                _ => return None,
            };
            Some((kv.key.clone(), value))
        })
        .collect()
}

fn to_proto_attributes(attrs: &Attributes) -> Vec<KeyValue> {
    attrs
        .iter()
        .map(|(k, v)| KeyValue {
            key: k.clone(),
            value: Some(AnyValue {
                value: Some(match v {
                    AttrValue::Str(s) => any_value::Value::StringValue(s.clone()),
                    AttrValue::Int(i) => any_value::Value::IntValue(*i),
                    AttrValue::Double(d) => any_value::Value::DoubleValue(*d),
                    AttrValue::Bool(b) => any_value::Value::BoolValue(*b),
                }),
            }),
        })
        .collect()
}

/// Groups spans by resource in first-seen order; span order within a group is kept.
fn group_by_resource(spans: &[SpanRecord]) -> Vec<(&Arc<ResourceInfo>, Vec<&SpanRecord>)> {
    let mut groups: Vec<(&Arc<ResourceInfo>, Vec<&SpanRecord>)> = Vec::new();
    for span in spans {
        match groups.iter_mut().find(|(r, _)| ***r == *span.resource) {
            Some((_, members)) => members.push(span),
            None => groups.push((&span.resource, vec![span])),
        }
    }
    groups
}

pub fn to_proto_request(spans: &[SpanRecord]) -> ExportTraceServiceRequest {
    let resource_spans = group_by_resource(spans)
        .into_iter()
        .map(|(resource, members)| ResourceSpans {
            resource: Some(Resource {
                attributes: to_proto_attributes(&resource.raw),
                ..Default::default()
            }),
            scope_spans: vec![ScopeSpans {
                spans: members
                    .into_iter()
                    .map(|s| Span {
                        trace_id: s.trace_id.0.to_vec(),
                        span_id: s.span_id.0.to_vec(),
                        parent_span_id: s
                            .parent_span_id
                            .map(|p| p.0.to_vec())
                            .unwrap_or_default(),
                        name: s.name.clone(),
                        kind: 1,
                        start_time_unix_nano: s.start_unix_nano,
                        end_time_unix_nano: s.end_unix_nano,
                        attributes: to_proto_attributes(&s.attributes),
                        ..Default::default()
                    })
                    .collect(),
                ..Default::default()
            }],
            ..Default::default()
        })
        .collect();
    ExportTraceServiceRequest { resource_spans }
}

pub fn encode_protobuf(spans: &[SpanRecord]) -> Vec<u8> {
    to_proto_request(spans).encode_to_vec()
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JsonExportRequest {
    #[serde(default)]
    pub resource_spans: Vec<JsonResourceSpans>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JsonResourceSpans {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<JsonResource>,
    #[serde(default)]
    pub scope_spans: Vec<JsonScopeSpans>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JsonResource {
    #[serde(default)]
    pub attributes: Vec<JsonKeyValue>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JsonScopeSpans {
    #[serde(default)]
    pub spans: Vec<JsonSpan>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JsonSpan {
    #[serde(default)]
    pub trace_id: String,
    #[serde(default)]
    pub span_id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub parent_span_id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub kind: u32,
    #[serde(default)]
    pub start_time_unix_nano: JsonU64,
    #[serde(default)]
    pub end_time_unix_nano: JsonU64,
    #[serde(default)]
    pub attributes: Vec<JsonKeyValue>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JsonKeyValue {
    pub key: String,
    #[serde(default)]
    pub value: Option<JsonAnyValue>,
}

/// OTLP/JSON `AnyValue`. Only the scalar variants are kept; `arrayValue`,
/// `kvlistValue` and `bytesValue` are ignored by serde and the attribute is
/// dropped.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JsonAnyValue {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub string_value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub int_value: Option<JsonI64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub double_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bool_value: Option<bool>,
}

/// 64-bit integer that OTLP/JSON writes as a string but lenient producers
/// write as a number.
#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct JsonU64(pub u64);

#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct JsonI64(pub i64);

#[derive(Deserialize)]
#[serde(untagged)]
enum NumOrString {
    Num(serde_json::Number),
    Str(String),
}

impl NumOrString {
    fn text(self) -> String {
        match self {
            NumOrString::Num(n) => n.to_string(),
            NumOrString::Str(s) => s,
        }
    }
}

impl Serialize for JsonU64 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for JsonU64 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = NumOrString::deserialize(d)?.text();
        text.parse()
            .map(JsonU64)
            .map_err(|_| serde::de::Error::custom(format!("invalid unsigned integer {text:?}")))
    }
}

impl Serialize for JsonI64 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for JsonI64 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = NumOrString::deserialize(d)?.text();
        text.parse()
            .map(JsonI64)
            .map_err(|_| serde::de::Error::custom(format!("invalid integer {text:?}")))
    }
}

fn json_attributes(kvs: &[JsonKeyValue]) -> Attributes {
    kvs.iter()
        .filter_map(|kv| {
            let v = kv.value.as_ref()?;
            let value = if let Some(s) = &v.string_value {
                AttrValue::Str(s.clone())
            } else if let Some(i) = v.int_value {
                AttrValue::Int(i.0)
            } else if let Some(d) = v.double_value {
                AttrValue::Double(d)
            } else {
                AttrValue::Bool(v.bool_value?)
            };
            Some((kv.key.clone(), value))
        })
        .collect()
}

fn to_json_attributes(attrs: &Attributes) -> Vec<JsonKeyValue> {
    attrs
        .iter()
        .map(|(k, v)| {
            let mut value = JsonAnyValue::default();
            match v {
                AttrValue::Str(s) => value.string_value = Some(s.clone()),
                AttrValue::Int(i) => value.int_value = Some(JsonI64(*i)),
                AttrValue::Double(d) => value.double_value = Some(*d),
                AttrValue::Bool(b) => value.bool_value = Some(*b),
            }
            JsonKeyValue {
                key: k.clone(),
                value: Some(value),
            }
        })
        .collect()
}

pub fn decode_json(body: &[u8]) -> Result<Vec<SpanRecord>, DecodeError> {
    let request: JsonExportRequest = serde_json::from_slice(body)?;
    let mut out = Vec::new();
    for rs in request.resource_spans {
        let raw = rs
            .resource
            .map(|r| json_attributes(&r.attributes))
            .unwrap_or_default();
        let resource = Arc::new(ResourceInfo::from_attributes(raw));
        for ss in rs.scope_spans {
            for span in ss.spans {
                let trace_id = TraceId::from_hex(&span.trace_id)
                    .ok_or_else(|| field_err("traceId", span.trace_id.clone()))?;
                let span_id = SpanId::from_hex(&span.span_id)
                    .ok_or_else(|| field_err("spanId", span.span_id.clone()))?;
                let parent_span_id = if span.parent_span_id.is_empty() {
                    None
                } else {
                    Some(
                        SpanId::from_hex(&span.parent_span_id)
                            .ok_or_else(|| field_err("parentSpanId", span.parent_span_id.clone()))?,
                    )
                };
                out.push(SpanRecord {
                    trace_id,
                    span_id,
                    parent_span_id,
                    attributes: json_attributes(&span.attributes),
                    name: span.name,
                    start_unix_nano: span.start_time_unix_nano.0,
                    end_unix_nano: span.end_time_unix_nano.0,
                    resource: Arc::clone(&resource),
                });
            }
        }
    }
    Ok(out)
}

pub fn to_json_request(spans: &[SpanRecord]) -> JsonExportRequest {
    let resource_spans = group_by_resource(spans)
        .into_iter()
        .map(|(resource, members)| JsonResourceSpans {
            resource: Some(JsonResource {
                attributes: to_json_attributes(&resource.raw),
            }),
            scope_spans: vec![JsonScopeSpans {
                spans: members
                    .into_iter()
                    .map(|s| JsonSpan {
                        trace_id: s.trace_id.to_hex(),
                        span_id: s.span_id.to_hex(),
                        parent_span_id: s.parent_span_id.map(|p| p.to_hex()).unwrap_or_default(),
                        name: s.name.clone(),
                        kind: 1,
                        start_time_unix_nano: JsonU64(s.start_unix_nano),
                        end_time_unix_nano: JsonU64(s.end_unix_nano),
                        attributes: to_json_attributes(&s.attributes),
                    })
                    .collect(),
            }],
        })
        .collect();
    JsonExportRequest { resource_spans }
}

/// Serializes spans as a single-line OTLP/JSON export request.
pub fn encode_json(spans: &[SpanRecord]) -> Vec<u8> {
    serde_json::to_vec(&to_json_request(spans)).expect("OTLP JSON types always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span_model::test_support::span;
    use proptest::prelude::*;

    fn sample() -> Vec<SpanRecord> {
        let mut a = span(7, 1, None, "GET /owners");
        a.attributes.insert("http.status_code".into(), AttrValue::Int(200));
        a.attributes.insert("retry".into(), AttrValue::Bool(false));
        a.attributes.insert("ratio".into(), AttrValue::Double(0.25));
        let mut b = span(7, 2, Some(1), "VetService.findAll");
        b.resource = Arc::new(ResourceInfo::new("vets-service", Some("vets-1")));
        vec![a, b]
    }

    #[test]
    fn decodes_spec_shaped_json() {
        let body = br#"{"resourceSpans":[{"resource":{"attributes":[
            {"key":"service.name","value":{"stringValue":"customers"}}]},
          "scopeSpans":[{"scope":{"name":"x"},"spans":[{
            "traceId":"5b8efff798038103d269b633813fc60c","spanId":"eee19b7ec3c1b174",
            "parentSpanId":"eee19b7ec3c1b173","name":"OwnerResource.findOwner","kind":2,
            "startTimeUnixNano":"1544712660000000000","endTimeUnixNano":1544712661000000000,
            "attributes":[{"key":"code.function","value":{"stringValue":"findOwner"}},
                          {"key":"n","value":{"intValue":"42"}},
                          {"key":"tags","value":{"arrayValue":{"values":[]}}}],
            "status":{}}]}]}]}"#;
        let spans = decode_json(body).unwrap();
        assert_eq!(spans.len(), 1);
        let s = &spans[0];
        assert_eq!(s.resource.service_name, "customers");
        assert_eq!(s.trace_id.to_hex(), "5b8efff798038103d269b633813fc60c");
        assert_eq!(s.parent_span_id.unwrap().to_hex(), "eee19b7ec3c1b173");
        assert_eq!(s.start_unix_nano, 1_544_712_660_000_000_000);
        assert_eq!(s.end_unix_nano, 1_544_712_661_000_000_000);
        assert_eq!(s.attributes.get("n"), Some(&AttrValue::Int(42)));
        assert!(!s.attributes.contains_key("tags"));
    }

    #[test]
    fn rejects_malformed_payloads() {
        assert!(decode_json(b"{not json").is_err());
        assert!(decode_json(br#"{"resourceSpans":[{"scopeSpans":[{"spans":[{"traceId":"zz","spanId":"01"}]}]}]}"#).is_err());
        assert!(decode_protobuf(&[0xff, 0xff, 0xff]).is_err());
    }

    #[test]
    fn empty_request_decodes_to_nothing() {
        assert!(decode_json(b"{}").unwrap().is_empty());
        assert!(decode_protobuf(&[]).unwrap().is_empty());
    }

    #[test]
    fn content_type_mapping() {
        assert_eq!(
            Encoding::from_content_type("application/json; charset=utf-8"),
            Some(Encoding::Json)
        );
        assert_eq!(
            Encoding::from_content_type("application/x-protobuf"),
            Some(Encoding::Protobuf)
        );
        assert_eq!(Encoding::from_content_type("text/plain"), None);
    }

    #[test]
    fn both_encodings_round_trip() {
        let spans = sample();
        for enc in [Encoding::Json, Encoding::Protobuf] {
            assert_eq!(decode(&encode(&spans, enc), enc).unwrap(), spans);
        }
    }

    proptest! {
        #[test]
        fn json_and_protobuf_agree(
            ids in prop::collection::vec((1u8..=255, any::<u64>(), 0u64..1_000_000, "[ -~]{0,16}"), 1..20)
        ) {
            let spans: Vec<SpanRecord> = ids
                .into_iter()
                .enumerate()
                .map(|(i, (t, start, dur, name))| {
                    let mut s = span(t, (i % 250 + 1) as u8, None, &name);
                    s.start_unix_nano = start / 2;
                    s.end_unix_nano = start / 2 + dur;
                    s
                })
                .collect();
            let via_json = decode_json(&encode_json(&spans)).unwrap();
            let via_proto = decode_protobuf(&encode_protobuf(&spans)).unwrap();
            prop_assert_eq!(&via_json, &via_proto);
            prop_assert_eq!(via_json, spans);
        }
    }
}
