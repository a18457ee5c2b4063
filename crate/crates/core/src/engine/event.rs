//! Virtual-time event queue. Events are dequeued in `(time, seq)` order, where
//! `seq` is a monotone insertion counter, so simultaneous events resolve in
//! the order they were scheduled.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::vector::ModelVector;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum SimEvent {
    /// A worker finished its gradient computation on the snapshot taken at `tag`.
    GradientReady { worker: usize, tag: usize, compute_time: f64 },
    /// The worker's noisy gradient is ready to be applied after gossip.
    GossipExchange { worker: usize, tag: usize, compute_time: f64, gradient: ModelVector },
    SyncBarrier { round: usize },
}

#[derive(Debug)]
struct Scheduled {
    time: f64,
    seq: u64,
    event: SimEvent,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    next_seq: u64,
}

impl EventQueue {
    pub(crate) fn push(&mut self, time: f64, event: SimEvent) {
        debug_assert!(time.is_finite() && time >= 0.0);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time, seq, event });
    }

    pub(crate) fn pop(&mut self) -> Option<(f64, SimEvent)> {
        self.heap.pop().map(|s| (s.time, s.event))
    }

    #[cfg(test)]
    pub(crate) fn len(&self) -> usize {
        self.heap.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_in_time_then_insertion_order() {
        let mut q = EventQueue::default();
        q.push(2.0, SimEvent::SyncBarrier { round: 0 });
        q.push(1.0, SimEvent::SyncBarrier { round: 1 });
        q.push(1.0, SimEvent::SyncBarrier { round: 2 });
        q.push(0.5, SimEvent::SyncBarrier { round: 3 });
        let order: Vec<_> = std::iter::from_fn(|| q.pop())
            .map(|(_, e)| match e {
                SimEvent::SyncBarrier { round } => round,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![3, 1, 2, 0]);
        assert_eq!(q.len(), 0);
    }
}
