//! OTLP trace receiver backed by a bounded FIFO buffer.
//!
//! Spans that arrive while the buffer is full are counted as dropped
//! (drop-new policy); nothing already accepted is ever evicted. Counters and
//! queue share one lock so every read of [`IngestCounters`] satisfies
//! `received == accepted + rejected + dropped`.

pub mod otlp;

use std::collections::VecDeque;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::ops::AddAssign;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

pub use otlp::{DecodeError, Encoding};

use crate::span_model::{validate, SpanRecord};

pub const DEFAULT_CAPACITY_SPANS: usize = 100_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestCounters {
    pub received_spans: u64,
    pub accepted_spans: u64,
    pub rejected_spans: u64,
    pub dropped_spans: u64,
}

impl IngestCounters {
    pub fn is_conserved(&self) -> bool {
        self.received_spans == self.accepted_spans + self.rejected_spans + self.dropped_spans
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptSummary {
    pub accepted: u64,
    pub rejected: u64,
    pub dropped: u64,
}

impl AcceptSummary {
    pub fn total(&self) -> u64 {
        self.accepted + self.rejected + self.dropped
    }
}

impl AddAssign for AcceptSummary {
    fn add_assign(&mut self, rhs: Self) {
        self.accepted += rhs.accepted;
        self.rejected += rhs.rejected;
        self.dropped += rhs.dropped;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    #[default]
    DropNew,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferConfig {
    pub capacity_spans: usize,
    pub drop_policy: DropPolicy,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig {
            capacity_spans: DEFAULT_CAPACITY_SPANS,
            drop_policy: DropPolicy::DropNew,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("buffer capacity must be at least 1")]
    ZeroCapacity,
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Result of replaying a file of OTLP/JSON lines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportSummary {
    #[serde(flatten)]
    pub spans: AcceptSummary,
    pub malformed_lines: u64,
}

#[derive(Debug, Default)]
struct Inner {
    queue: VecDeque<SpanRecord>,
    counters: IngestCounters,
}

#[derive(Debug)]
pub struct IngestBuffer {
    config: BufferConfig,
    inner: Mutex<Inner>,
}

impl IngestBuffer {
    pub fn new(config: BufferConfig) -> Result<Self, IngestError> {
        if config.capacity_spans == 0 {
            return Err(IngestError::ZeroCapacity);
        }
        Ok(IngestBuffer {
            config,
            inner: Mutex::new(Inner::default()),
        })
    }

    pub fn config(&self) -> BufferConfig {
        self.config
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Decodes an export request and offers its spans to the buffer.
    ///
    /// A payload that fails to decode leaves every counter untouched.
    pub fn receive_export(
        &self,
        body: &[u8],
        encoding: Encoding,
    ) -> Result<AcceptSummary, IngestError> {
        let spans = otlp::decode(body, encoding)?;
        Ok(self.offer_spans(spans))
    }

    /// Validates and enqueues already-decoded spans.
    pub fn offer_spans(&self, spans: Vec<SpanRecord>) -> AcceptSummary {
        let mut summary = AcceptSummary::default();
        let mut valid = Vec::with_capacity(spans.len());
        for span in spans {
            match validate(&span) {
                Ok(()) => valid.push(span),
                Err(_) => summary.rejected += 1,
            }
        }

        let mut inner = self.lock();
        let room = self.config.capacity_spans.saturating_sub(inner.queue.len());
        let accepted = valid.len().min(room);
        summary.dropped = (valid.len() - accepted) as u64;
        summary.accepted = accepted as u64;
        inner.queue.extend(valid.into_iter().take(accepted));
        inner.counters.received_spans += summary.total();
        inner.counters.accepted_spans += summary.accepted;
        inner.counters.rejected_spans += summary.rejected;
        inner.counters.dropped_spans += summary.dropped;
        summary
    }

    /// Replays a file holding one OTLP/JSON export request per line.
    ///
    /// Blank lines are ignored; lines that fail to decode are counted and
    /// skipped.
    pub fn import_file(&self, path: &Path) -> Result<ImportSummary, IngestError> {
        let io_err = |source| IngestError::Io {
            path: path.display().to_string(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut summary = ImportSummary::default();
        for line in reader.lines() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            match self.receive_export(line.as_bytes(), Encoding::Json) {
                Ok(s) => summary.spans += s,
                Err(_) => summary.malformed_lines += 1,
            }
        }
        Ok(summary)
    }

    /// Removes up to `max` spans in arrival order.
    pub fn drain(&self, max: usize) -> Vec<SpanRecord> {
        let mut inner = self.lock();
        let n = max.min(inner.queue.len());
        inner.queue.drain(..n).collect()
    }

    pub fn counters(&self) -> IngestCounters {
        self.lock().counters
    }

    pub fn len(&self) -> usize {
        self.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
