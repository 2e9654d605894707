//! Posts generated batches to an OTLP/HTTP receiver as protobuf.

use std::time::Duration;

use opentelemetry_proto::tonic::collector::trace::v1::ExportTraceServiceResponse;
use prost::Message;
use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;
use tokio::time::Instant;

use crate::ingest::otlp::{self, Encoding};
use crate::span_model::SpanRecord;

#[derive(Clone, Debug)]
pub struct SendOptions {
    /// Base URL of the receiver, or the full `/v1/traces` URL.
    pub target: String,
    /// Spans per second; `None` sends as fast as possible.
    pub rate: Option<u64>,
    pub concurrency: usize,
    pub retries: u32,
}

impl SendOptions {
    pub fn new(target: impl Into<String>) -> Self {
        SendOptions {
            target: target.into(),
            rate: None,
            concurrency: 8,
            retries: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendReport {
    pub batches: u64,
    /// Spans in requests the server answered with success.
    pub sent: u64,
    /// Of `sent`, spans the server reported as rejected or dropped.
    pub server_rejected: u64,
    /// Spans in requests that never got a success response.
    pub unacknowledged: u64,
    pub failed_batches: u64,
}

impl SendReport {
    pub fn server_accepted(&self) -> u64 {
        self.sent - self.server_rejected
    }
}

pub fn target_url(target: &str) -> String {
    let base = target.trim_end_matches('/');
    if base.ends_with("/v1/traces") {
        base.to_owned()
    } else {
        format!("{base}/v1/traces")
    }
}

enum Outcome {
    Acknowledged { rejected: u64 },
    Failed,
}

async fn post_batch(client: &reqwest::Client, url: &str, body: Vec<u8>, retries: u32) -> Outcome {
    let mut delay = Duration::from_millis(50);
    for attempt in 0..=retries {
        let result = client
            .post(url)
            .header("content-type", Encoding::Protobuf.content_type())
            .body(body.clone())
            .send()
            .await;
        match result {
            Ok(resp) if resp.status().is_success() => {
                let bytes = resp.bytes().await.unwrap_or_default();
                let rejected = ExportTraceServiceResponse::decode(bytes.as_ref())
                    .ok()
                    .and_then(|r| r.partial_success)
                    .map_or(0, |p| p.rejected_spans.max(0) as u64);
                return Outcome::Acknowledged { rejected };
            }
            Ok(resp) if !(resp.status().is_server_error() || resp.status().as_u16() == 429) => {
                tracing::warn!(status = %resp.status(), "export refused");
                return Outcome::Failed;
            }
            Ok(resp) => tracing::debug!(status = %resp.status(), attempt, "retrying export"),
            Err(e) => tracing::debug!(error = %e, attempt, "retrying export"),
        }
        if attempt < retries {
            tokio::time::sleep(delay).await;
            delay *= 2;
        }
    }
    Outcome::Failed
}

/// Sends every batch, keeping at most `concurrency` requests in flight.
/// Completion order of batches is not preserved.
pub async fn send(batches: impl IntoIterator<Item = Vec<SpanRecord>>, options: &SendOptions) -> SendReport {
    let url = target_url(&options.target);
    let client = reqwest::Client::new();
    let mut report = SendReport::default();
    let mut in_flight: JoinSet<(u64, Outcome)> = JoinSet::new();
    let started = Instant::now();
    let mut dispatched = 0u64;

    let settle = |report: &mut SendReport, (spans, outcome): (u64, Outcome)| match outcome {
        Outcome::Acknowledged { rejected } => {
            report.sent += spans;
            report.server_rejected += rejected.min(spans);
        }
        Outcome::Failed => {
            report.unacknowledged += spans;
            report.failed_batches += 1;
        }
    };

    for batch in batches {
        if batch.is_empty() {
            continue;
        }
        if let Some(rate) = options.rate.filter(|&r| r > 0) {
            let due = started + Duration::from_secs_f64(dispatched as f64 / rate as f64);
            tokio::time::sleep_until(due).await;
        }
        while in_flight.len() >= options.concurrency.max(1) {
            if let Some(Ok(done)) = in_flight.join_next().await {
                settle(&mut report, done);
            }
        }
        let spans = batch.len() as u64;
        dispatched += spans;
        report.batches += 1;
        let (client, url, retries) = (client.clone(), url.clone(), options.retries);
        in_flight.spawn(async move {
            let body = otlp::encode_protobuf(&batch);
            (spans, post_batch(&client, &url, body, retries).await)
        });
    }
    while let Some(done) = in_flight.join_next().await {
        if let Ok(done) = done {
            settle(&mut report, done);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_urls() {
        assert_eq!(target_url("http://h:1"), "http://h:1/v1/traces");
        assert_eq!(target_url("http://h:1/"), "http://h:1/v1/traces");
        assert_eq!(target_url("http://h:1/v1/traces"), "http://h:1/v1/traces");
    }

    #[tokio::test]
    async fn empty_stream_sends_nothing() {
        let report = send(Vec::new(), &SendOptions::new("http://127.0.0.1:9")).await;
        assert_eq!(report, SendReport::default());
    }

    #[tokio::test]
    async fn unreachable_target_is_reported_unacknowledged() {
        let spans = vec![crate::span_model::test_support::span(1, 1, None, "a")];
        let mut options = SendOptions::new("http://127.0.0.1:9");
        options.retries = 1;
        let report = send(vec![spans], &options).await;
        assert_eq!(report.sent, 0);
        assert_eq!(report.unacknowledged, 1);
        assert_eq!(report.failed_batches, 1);
    }
}
