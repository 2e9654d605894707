//! Groups spans by trace id and builds parent/child call trees.
//!
//! A trace is considered complete once no span for it has been offered for
//! `inactivity_timeout_nano`. Spans whose parent never arrived become roots
//! and are counted as orphans.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::span_model::{SpanId, SpanRecord, TraceId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    pub inactivity_timeout_nano: u64,
    pub clock_skew_tolerance_nano: u64,
    /// Upper bound on spans held in pending traces. When exceeded, the least
    /// recently active traces are completed early.
    pub max_pending_spans: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            inactivity_timeout_nano: 10_000_000_000,
            clock_skew_tolerance_nano: 1_000_000,
            max_pending_spans: 200_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub span: SpanRecord,
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    fn count(&self) -> usize {
        1 + self.children.iter().map(TreeNode::count).sum::<usize>()
    }

    /// Pre-order walk.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(Option<&'a SpanRecord>, &'a SpanRecord)) {
        self.walk_from(None, f);
    }

    fn walk_from<'a>(
        &'a self,
        parent: Option<&'a SpanRecord>,
        f: &mut impl FnMut(Option<&'a SpanRecord>, &'a SpanRecord),
    ) {
        f(parent, &self.span);
        for child in &self.children {
            child.walk_from(Some(&self.span), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceTree {
    pub trace_id: TraceId,
    pub roots: Vec<TreeNode>,
    pub span_count: usize,
    pub first_start_unix_nano: u64,
    pub last_end_unix_nano: u64,
    /// Roots whose parent id referenced a span missing from this trace, plus
    /// spans promoted to roots to break a parent-id cycle.
    pub orphan_count: usize,
    /// Links kept although the child started more than the tolerance before
    /// its parent.
    pub skewed_links: usize,
}

impl TraceTree {
    /// Assembles a tree from the spans of one trace. Spans are expected to
    /// carry unique ids.
    pub fn assemble(trace_id: TraceId, spans: Vec<SpanRecord>, skew_tolerance_nano: u64) -> Self {
        let span_count = spans.len();
        let first_start_unix_nano = spans.iter().map(|s| s.start_unix_nano).min().unwrap_or(0);
        let last_end_unix_nano = spans.iter().map(|s| s.end_unix_nano).max().unwrap_or(0);

        let ids: HashSet<SpanId> = spans.iter().map(|s| s.span_id).collect();
        let mut children: HashMap<SpanId, Vec<SpanRecord>> = HashMap::new();
        let mut roots = Vec::new();
        let mut orphan_count = 0;
        for span in spans {
            match span.parent_span_id {
                Some(parent) if ids.contains(&parent) => {
                    children.entry(parent).or_default().push(span)
                }
                Some(_) => {
                    orphan_count += 1;
                    roots.push(span);
                }
                None => roots.push(span),
            }
        }
        for list in children.values_mut() {
            list.sort_by(order_key);
        }

        let mut skewed_links = 0;
        let mut placed = 0;
        let mut root_nodes = build_nodes(roots, &mut children, skew_tolerance_nano, &mut skewed_links, &mut placed);

        // Whatever is left sits on a parent cycle. Break each cycle at its
        // earliest span and treat that span as an orphan root.
        while !children.is_empty() {
            let mut rest: Vec<SpanRecord> = children.values().flatten().cloned().collect();
            rest.sort_by(order_key);
            let head = rest.swap_remove(0);
            if let Some(list) = head.parent_span_id.and_then(|p| children.get_mut(&p)) {
                list.retain(|s| s.span_id != head.span_id);
            }
            children.retain(|_, v| !v.is_empty());
            orphan_count += 1;
            root_nodes.extend(build_nodes(vec![head], &mut children, skew_tolerance_nano, &mut skewed_links, &mut placed));
        }
        root_nodes.sort_by(|a, b| order_key(&a.span, &b.span));
        debug_assert_eq!(placed, span_count);

        TraceTree {
            trace_id,
            roots: root_nodes,
            span_count,
            first_start_unix_nano,
            last_end_unix_nano,
            orphan_count,
            skewed_links,
        }
    }

    pub fn node_count(&self) -> usize {
        self.roots.iter().map(TreeNode::count).sum()
    }

    pub fn spans(&self) -> Vec<&SpanRecord> {
        let mut out = Vec::with_capacity(self.span_count);
        for root in &self.roots {
            root.walk(&mut |_, s| out.push(s));
        }
        out
    }

    /// One `(parent, child)` pair per tree edge, ordered by parent start,
    /// child start, then child span id.
    pub fn caller_callee_pairs(&self) -> Vec<(&SpanRecord, &SpanRecord)> {
        let mut pairs = Vec::new();
        for root in &self.roots {
            root.walk(&mut |parent, child| {
                if let Some(parent) = parent {
                    pairs.push((parent, child));
                }
            });
        }
        pairs.sort_by(|a, b| {
            (a.0.start_unix_nano, a.0.span_id, a.1.start_unix_nano, a.1.span_id).cmp(&(
                b.0.start_unix_nano,
                b.0.span_id,
                b.1.start_unix_nano,
                b.1.span_id,
            ))
        });
        pairs
    }
}

fn order_key(a: &SpanRecord, b: &SpanRecord) -> std::cmp::Ordering {
    (a.start_unix_nano, a.span_id).cmp(&(b.start_unix_nano, b.span_id))
}

fn build_nodes(
    spans: Vec<SpanRecord>,
    children: &mut HashMap<SpanId, Vec<SpanRecord>>,
    tolerance: u64,
    skewed: &mut usize,
    placed: &mut usize,
) -> Vec<TreeNode> {
    // Iterative so that very deep traces cannot overflow the stack.
    struct Frame {
        span: SpanRecord,
        pending: std::vec::IntoIter<SpanRecord>,
        done: Vec<TreeNode>,
    }
    let mut out = Vec::with_capacity(spans.len());
    for root in spans {
        let mut stack = vec![Frame {
            pending: children.remove(&root.span_id).unwrap_or_default().into_iter(),
            span: root,
            done: Vec::new(),
        }];
        *placed += 1;
        while let Some(top) = stack.last_mut() {
            if let Some(child) = top.pending.next() {
                if child.start_unix_nano.saturating_add(tolerance) < top.span.start_unix_nano {
                    *skewed += 1;
                }
                *placed += 1;
                let grandchildren = children.remove(&child.span_id).unwrap_or_default();
                stack.push(Frame {
                    span: child,
                    pending: grandchildren.into_iter(),
                    done: Vec::new(),
                });
            } else {
                let frame = stack.pop().expect("non-empty stack");
                let node = TreeNode {
                    span: frame.span,
                    children: frame.done,
                };
                match stack.last_mut() {
                    Some(parent) => parent.done.push(node),
                    None => out.push(node),
                }
            }
        }
    }
    out
}

#[derive(Debug)]
struct PendingTrace {
    spans: HashMap<SpanId, SpanRecord>,
    last_activity: u64,
}

/// Single-writer trace assembler.
#[derive(Debug, Default)]
pub struct Assembler {
    config: AssemblyConfig,
    pending: HashMap<TraceId, PendingTrace>,
    pending_spans: usize,
}

impl Assembler {
    pub fn new(config: AssemblyConfig) -> Self {
        Assembler {
            config,
            pending: HashMap::new(),
            pending_spans: 0,
        }
    }

    pub fn config(&self) -> AssemblyConfig {
        self.config
    }

    /// Adds a validated span. A repeated span id replaces the earlier record.
    pub fn offer(&mut self, span: SpanRecord, now: u64) {
        let trace = self
            .pending
            .entry(span.trace_id)
            .or_insert_with(|| PendingTrace {
                spans: HashMap::new(),
                last_activity: now,
            });
        trace.last_activity = now;
        if trace.spans.insert(span.span_id, span).is_none() {
            self.pending_spans += 1;
        }
    }

    pub fn pending_traces(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_spans(&self) -> usize {
        self.pending_spans
    }

    /// Completes every trace idle for at least the inactivity timeout, plus
    /// the least recently active ones while over `max_pending_spans`.
    pub fn complete_expired(&mut self, now: u64) -> Vec<TraceTree> {
        let timeout = self.config.inactivity_timeout_nano;
        let mut expired: Vec<TraceId> = self
            .pending
            .iter()
            .filter(|(_, t)| now.saturating_sub(t.last_activity) >= timeout)
            .map(|(id, _)| *id)
            .collect();

        let mut remaining = self.pending_spans
            - expired
                .iter()
                .map(|id| self.pending[id].spans.len())
                .sum::<usize>();
        if remaining > self.config.max_pending_spans {
            let expired_set: HashSet<TraceId> = expired.iter().copied().collect();
            let mut by_age: Vec<(u64, TraceId)> = self
                .pending
                .iter()
                .filter(|(id, _)| !expired_set.contains(id))
                .map(|(id, t)| (t.last_activity, *id))
                .collect();
            by_age.sort_unstable();
            for (_, id) in by_age {
                if remaining <= self.config.max_pending_spans {
                    break;
                }
                remaining -= self.pending[&id].spans.len();
                expired.push(id);
            }
        }
        self.take(expired)
    }

    /// Completes every pending trace regardless of activity.
    pub fn complete_all(&mut self) -> Vec<TraceTree> {
        let ids = self.pending.keys().copied().collect();
        self.take(ids)
    }

    fn take(&mut self, ids: Vec<TraceId>) -> Vec<TraceTree> {
        let tolerance = self.config.clock_skew_tolerance_nano;
        let mut trees: Vec<TraceTree> = ids
            .into_iter()
            .filter_map(|id| self.pending.remove(&id).map(|t| (id, t)))
            .map(|(id, t)| {
                self.pending_spans -= t.spans.len();
                TraceTree::assemble(id, t.spans.into_values().collect(), tolerance)
            })
            .collect();
        trees.sort_by_key(|t| (t.first_start_unix_nano, t.trace_id));
        trees
    }
}

/// Brute-force parent/child enumeration straight from parent ids.
#[cfg(test)]
pub(crate) fn reference_pairs(
    spans: &[SpanRecord],
) -> std::collections::BTreeMap<(SpanId, SpanId), usize> {
    let mut out = std::collections::BTreeMap::new();
    for child in spans {
        for parent in spans {
            if child.parent_span_id == Some(parent.span_id) {
                *out.entry((parent.span_id, child.span_id)).or_default() += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span_model::test_support::span;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn timed(id: u8, parent: Option<u8>, start: u64) -> SpanRecord {
        let mut s = span(9, id, parent, "x");
        s.start_unix_nano = start;
        s.end_unix_nano = start + 100;
        s
    }

    fn config() -> AssemblyConfig {
        AssemblyConfig {
            inactivity_timeout_nano: 10,
            ..Default::default()
        }
    }

    #[test]
    fn offer_groups_and_dedups() {
        let mut a = Assembler::new(config());
        a.offer(timed(1, None, 0), 0);
        a.offer(timed(2, Some(1), 5), 0);
        a.offer(timed(2, Some(1), 5), 1);
        assert_eq!(a.pending_traces(), 1);
        assert_eq!(a.pending_spans(), 2);
        assert!(a.complete_expired(5).is_empty());
        let trees = a.complete_expired(11);
        assert_eq!(trees.len(), 1);
        assert_eq!(trees[0].span_count, 2);
        assert_eq!(a.pending_spans(), 0);
        assert!(a.complete_expired(100).is_empty());
    }

    #[test]
    fn single_span_and_fanout_pairs() {
        let t = TraceTree::assemble(TraceId([9; 16]), vec![timed(1, None, 0)], 0);
        assert!(t.caller_callee_pairs().is_empty());
        let t = TraceTree::assemble(
            TraceId([9; 16]),
            vec![timed(3, Some(1), 20), timed(1, None, 0), timed(2, Some(1), 10)],
            0,
        );
        let pairs: Vec<_> = t
            .caller_callee_pairs()
            .iter()
            .map(|(p, c)| (p.span_id.0[0], c.span_id.0[0]))
            .collect();
        assert_eq!(pairs, vec![(1, 2), (1, 3)]);
        assert_eq!(t.first_start_unix_nano, 0);
        assert_eq!(t.last_end_unix_nano, 120);
    }

    #[test]
    fn dropped_interior_span_promotes_children_to_orphan_roots() {
        // 1 -> 2 -> {4, 5}; 1 -> 3. Remove 2.
        let spans = vec![
            timed(1, None, 0),
            timed(3, Some(1), 30),
            timed(4, Some(2), 20),
            timed(5, Some(2), 25),
        ];
        let t = TraceTree::assemble(TraceId([9; 16]), spans, 0);
        assert_eq!(t.orphan_count, 2);
        let roots: Vec<u8> = t.roots.iter().map(|n| n.span.span_id.0[0]).collect();
        assert_eq!(roots, vec![1, 4, 5]);
        assert_eq!(t.roots[0].children.len(), 1);
        assert_eq!(t.node_count(), 4);
    }

    #[test]
    fn parent_cycles_are_broken() {
        let spans = vec![timed(1, Some(2), 0), timed(2, Some(1), 5), timed(3, Some(2), 6)];
        let t = TraceTree::assemble(TraceId([9; 16]), spans, 0);
        assert_eq!(t.node_count(), 3);
        assert_eq!(t.roots.len(), 1);
        assert_eq!(t.roots[0].span.span_id.0[0], 1);
        assert_eq!(t.orphan_count, 1);
    }

    #[test]
    fn skew_is_counted_not_repaired() {
        let t = TraceTree::assemble(
            TraceId([9; 16]),
            vec![timed(1, None, 1_000), timed(2, Some(1), 0)],
            10,
        );
        assert_eq!(t.skewed_links, 1);
        assert_eq!(t.roots[0].children.len(), 1);
    }

    #[test]
    fn late_spans_start_a_fresh_trace() {
        let mut a = Assembler::new(config());
        a.offer(timed(1, None, 0), 0);
        let first = a.complete_expired(10);
        a.offer(timed(2, Some(1), 5), 20);
        let second = a.complete_expired(30);
        assert_eq!(first[0].span_count, 1);
        assert_eq!(second[0].span_count, 1);
        assert_eq!(second[0].orphan_count, 1);
    }

    #[test]
    fn pending_span_bound_forces_oldest_completion() {
        let mut a = Assembler::new(AssemblyConfig {
            inactivity_timeout_nano: 1_000,
            max_pending_spans: 2,
            ..Default::default()
        });
        for (i, now) in [(1u8, 1u64), (2, 2), (3, 3)] {
            let mut s = timed(1, None, 0);
            s.trace_id = TraceId([i; 16]);
            a.offer(s, now);
        }
        let done = a.complete_expired(4);
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].trace_id, TraceId([1; 16]));
        assert_eq!(a.pending_spans(), 2);
    }

    /// Random forest over ids 1..=n; parent always has a smaller id.
    fn random_trace() -> impl Strategy<Value = Vec<SpanRecord>> {
        (1usize..25).prop_flat_map(|n| {
            (
                prop::collection::vec(any::<prop::sample::Index>(), n),
                prop::collection::vec(0u64..50, n),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_map(move |(parents, starts, is_root)| {
                    (1..=n)
                        .map(|id| {
                            let parent = if id == 1 || is_root[id - 1] {
                                None
                            } else {
                                Some(parents[id - 1].index(id - 1) as u8 + 1)
                            };
                            timed(id as u8, parent, starts[id - 1])
                        })
                        .collect()
                })
        })
    }

    proptest! {
        #[test]
        fn assembly_is_permutation_invariant(spans in random_trace(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let in_order = TraceTree::assemble(TraceId([9; 16]), spans.clone(), config().clock_skew_tolerance_nano);
            let mut shuffled = spans.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut a = Assembler::new(config());
            for s in shuffled {
                a.offer(s, 0);
            }
            let trees = a.complete_expired(10);
            prop_assert_eq!(trees.len(), 1);
            prop_assert_eq!(&trees[0], &in_order);
            prop_assert_eq!(in_order.node_count(), spans.len());
        }

        #[test]
        fn pairs_match_brute_force(spans in random_trace()) {
            let t = TraceTree::assemble(TraceId([9; 16]), spans.clone(), 0);
            let mut got: BTreeMap<(SpanId, SpanId), usize> = BTreeMap::new();
            for (p, c) in t.caller_callee_pairs() {
                *got.entry((p.span_id, c.span_id)).or_default() += 1;
            }
            prop_assert_eq!(got, reference_pairs(&spans));
            let roots = spans.iter().filter(|s| s.parent_span_id.is_none()).count();
            prop_assert_eq!(t.roots.len(), roots);
        }
    }
}
