//! The single consumer that moves spans from the ingest buffer through trace
//! assembly into the snapshot store.
//!
//! Each step drains at most `drain_batch` spans, so a burst that arrives
//! faster than the consumer's rate fills the buffer and overflows.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::assembly::{Assembler, AssemblyConfig};
use crate::ingest::{IngestBuffer, IngestCounters};
use crate::store::{SnapshotStore, StoreError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub pending_traces: usize,
    pub pending_spans: usize,
    pub completed_traces: u64,
    /// Spans drained from the buffer whose effects are visible, either as
    /// pending traces or in the store.
    pub consumed_spans: u64,
}

#[derive(Debug)]
pub struct Pipeline {
    buffer: Arc<IngestBuffer>,
    store: Arc<SnapshotStore>,
    assembler: Mutex<Assembler>,
    drain_batch: usize,
    pending_traces: AtomicUsize,
    pending_spans: AtomicUsize,
    completed_traces: AtomicU64,
    consumed_spans: AtomicU64,
    persist_errors: AtomicU64,
}

pub fn wall_clock_nano() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

impl Pipeline {
    pub fn new(
        buffer: Arc<IngestBuffer>,
        store: Arc<SnapshotStore>,
        assembly: AssemblyConfig,
        drain_batch: usize,
    ) -> Self {
        Pipeline {
            buffer,
            store,
            assembler: Mutex::new(Assembler::new(assembly)),
            drain_batch: drain_batch.max(1),
            pending_traces: AtomicUsize::new(0),
            pending_spans: AtomicUsize::new(0),
            completed_traces: AtomicU64::new(0),
            consumed_spans: AtomicU64::new(0),
            persist_errors: AtomicU64::new(0),
        }
    }

    pub fn buffer(&self) -> &Arc<IngestBuffer> {
        &self.buffer
    }

    pub fn store(&self) -> &Arc<SnapshotStore> {
        &self.store
    }

    pub fn stats(&self) -> PipelineStats {
        // Load order matters: everything below was published before the
        // consumed count it is read against.
        let consumed_spans = self.consumed_spans.load(Ordering::Acquire);
        PipelineStats {
            consumed_spans,
            pending_traces: self.pending_traces.load(Ordering::Acquire),
            pending_spans: self.pending_spans.load(Ordering::Acquire),
            completed_traces: self.completed_traces.load(Ordering::Acquire),
        }
    }

    pub fn persist_errors(&self) -> u64 {
        self.persist_errors.load(Ordering::Relaxed)
    }

    /// One consumer step at time `now`. Returns the number of spans drained.
    pub fn step(&self, now: u64) -> usize {
        let spans = self.buffer.drain(self.drain_batch);
        let drained = spans.len();
        let mut assembler = self.assembler.lock().unwrap_or_else(|e| e.into_inner());
        for span in spans {
            assembler.offer(span, now);
        }
        let trees = assembler.complete_expired(now);
        let pending = (assembler.pending_traces(), assembler.pending_spans());
        drop(assembler);
        self.commit(&trees);
        self.publish(pending, trees.len(), drained);
        drained
    }

    /// Drains everything and completes every pending trace regardless of
    /// inactivity. Used on shutdown and by offline imports.
    pub fn settle(&self) -> Result<(), StoreError> {
        let mut assembler = self.assembler.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            let spans = self.buffer.drain(self.drain_batch);
            if spans.is_empty() {
                break;
            }
            let now = wall_clock_nano();
            let drained = spans.len();
            for span in spans {
                assembler.offer(span, now);
            }
            // Keep the bound on pending spans while catching up.
            let trees = assembler.complete_expired(now);
            self.store.route_batch(&trees, self.buffer.counters());
            let pending = (assembler.pending_traces(), assembler.pending_spans());
            self.publish(pending, trees.len(), drained);
        }
        let trees = assembler.complete_all();
        drop(assembler);
        self.store.route_batch(&trees, self.buffer.counters());
        self.publish((0, 0), trees.len(), 0);
        self.store.persist_dirty().map(|_| ())
    }

    /// Called once the step's trees are in the store, so a reader that sees
    /// no pending traces also sees their landscapes.
    fn publish(&self, (traces, spans): (usize, usize), completed: usize, drained: usize) {
        self.pending_traces.store(traces, Ordering::Release);
        self.pending_spans.store(spans, Ordering::Release);
        self.completed_traces.fetch_add(completed as u64, Ordering::AcqRel);
        self.consumed_spans.fetch_add(drained as u64, Ordering::AcqRel);
    }

    fn commit(&self, trees: &[crate::assembly::TraceTree]) {
        if !trees.is_empty() {
            self.store.route_batch(trees, self.buffer.counters());
        }
        if let Err(e) = self.store.persist_dirty() {
            self.persist_errors.fetch_add(1, Ordering::Relaxed);
            tracing::error!(error = %e, "persisting windows failed");
        }
    }

    /// Runs [`Pipeline::step`] on a background thread every `tick`.
    pub fn spawn(self: &Arc<Self>, tick: Duration) -> ConsumerHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let pipeline = Arc::clone(self);
        let flag = Arc::clone(&stop);
        let thread = std::thread::Builder::new()
            .name("span-consumer".into())
            .spawn(move || {
                while !flag.load(Ordering::Acquire) {
                    pipeline.step(wall_clock_nano());
                    std::thread::park_timeout(tick);
                }
            })
            .expect("spawning the consumer thread");
        ConsumerHandle {
            stop,
            thread: Some(thread),
        }
    }

    pub fn counters(&self) -> IngestCounters {
        self.buffer.counters()
    }
}

#[derive(Debug)]
pub struct ConsumerHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ConsumerHandle {
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            t.thread().unpark();
            let _ = t.join();
        }
    }
}

impl Drop for ConsumerHandle {
    fn drop(&mut self) {
        self.halt();
    }
}
