//! Deterministic discrete-event core.
//!
//! A [`Simulation`] owns a virtual clock and a priority queue of [`Event`]s
//! ordered by `(fire_time, sequence)`. Events at equal times fire in the
//! order they were scheduled. Cancellation is lazy: a cancelled handle is
//! remembered and its event is skipped when it reaches the front.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("event scheduled in the past: fire_time {fire_time} < now {now}")]
    PastTime { fire_time: f64, now: f64 },
    #[error("fire time must be finite, got {0}")]
    NonFiniteTime(f64),
}

/// What an event represents. The payload carries the details.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    TaskArrival,
    TaskCompletion,
    MonitorTick,
    DecisionEpoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub fire_time: f64,
    pub kind: EventKind,
    pub payload: P,
}

impl<P> Event<P> {
    pub fn new(fire_time: f64, kind: EventKind, payload: P) -> Self {
        Self { fire_time, kind, payload }
    }
}

/// Handle returned by [`Simulation::schedule`]; the event's sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn sequence(self) -> u64 {
        self.0
    }
}

/// Virtual time in seconds. Only moves forward.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now: f64,
}

impl SimClock {
    pub fn now(&self) -> f64 {
        self.now
    }

    fn advance_to(&mut self, t: f64) {
        debug_assert!(t >= self.now, "clock moved backwards: {t} < {}", self.now);
        if t > self.now {
            self.now = t;
        }
    }
}

/// One processed event, as recorded in the audit trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceEntry {
    pub time_bits: u64,
    pub sequence: u64,
    pub kind: EventKind,
    pub payload_digest: u64,
}

impl TraceEntry {
    pub fn time(&self) -> f64 {
        f64::from_bits(self.time_bits)
    }
}

struct Queued<P> {
    seq: u64,
    event: Event<P>,
}

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // BinaryHeap is a max-heap: invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .event
            .fire_time
            .total_cmp(&self.event.fire_time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

pub struct Simulation<P> {
    clock: SimClock,
    queue: BinaryHeap<Queued<P>>,
    cancelled: HashSet<u64>,
    next_seq: u64,
    trace: Option<Vec<TraceEntry>>,
}

impl<P> Default for Simulation<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Simulation<P> {
    pub fn new() -> Self {
        Self {
            clock: SimClock::default(),
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            next_seq: 0,
            trace: None,
        }
    }

    /// Turns on trace recording. Every processed event is appended.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    /// Number of live (not cancelled) events still queued.
    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, event: Event<P>) -> Result<EventHandle, SimError> {
        if !event.fire_time.is_finite() {
            return Err(SimError::NonFiniteTime(event.fire_time));
        }
        if event.fire_time < self.clock.now() {
            return Err(SimError::PastTime { fire_time: event.fire_time, now: self.clock.now() });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued { seq, event });
        Ok(EventHandle(seq))
    }

    /// Cancels a scheduled event. Returns false if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_seq {
            return false;
        }
        if !self.queue.iter().any(|q| q.seq == handle.0) {
            return false;
        }
        self.cancelled.insert(handle.0)
    }

    fn drop_cancelled_front(&mut self) {
        while let Some(top) = self.queue.peek() {
            if self.cancelled.remove(&top.seq) {
                self.queue.pop();
            } else {
                break;
            }
        }
    }

    pub fn peek_time(&mut self) -> Option<f64> {
        self.drop_cancelled_front();
        self.queue.peek().map(|q| q.event.fire_time)
    }
}

impl<P: Hash> Simulation<P> {
    /// Pops the next event if it fires at or before `t_end`, advancing the
    /// clock to its fire time.
    pub fn pop_until(&mut self, t_end: f64) -> Option<(EventHandle, Event<P>)> {
        self.drop_cancelled_front();
        if self.queue.peek()?.event.fire_time > t_end {
            return None;
        }
        let Queued { seq, event } = self.queue.pop()?;
        self.clock.advance_to(event.fire_time);
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry {
                time_bits: event.fire_time.to_bits(),
                sequence: seq,
                kind: event.kind,
                payload_digest: digest(&event.payload),
            });
        }
        Some((EventHandle(seq), event))
    }

    /// Processes every event with `fire_time <= t_end` in total order, then
    /// sets the clock to `t_end`. The handler may schedule further events.
    pub fn run_until<F>(&mut self, t_end: f64, mut handler: F) -> usize
    where
        F: FnMut(&mut Self, Event<P>),
    {
        let mut processed = 0;
        while let Some((_, event)) = self.pop_until(t_end) {
            handler(self, event);
            processed += 1;
        }
        self.clock.advance_to(t_end.max(self.clock.now()));
        processed
    }

    /// Moves the clock forward without processing anything. Fails if an
    /// event is due before `t`.
    pub fn advance_to(&mut self, t: f64) -> Result<(), SimError> {
        if t < self.clock.now() {
            return Err(SimError::PastTime { fire_time: t, now: self.clock.now() });
        }
        if let Some(next) = self.peek_time() {
            if next < t {
                return Err(SimError::PastTime { fire_time: next, now: t });
            }
        }
        self.clock.advance_to(t);
        Ok(())
    }
}

/// Stable 64-bit digest (SipHash with fixed keys).
pub fn digest<T: Hash + ?Sized>(value: &T) -> u64 {
    #[allow(deprecated)]
    let mut h = std::hash::SipHasher::new();
    value.hash(&mut h);
    h.finish()
}

/// Named RNG stream. Equal `(seed, stream)` pairs yield equal draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeededRng {
    pub seed: u64,
    pub stream: u64,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Stream ids for the independent consumers of randomness.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const EXPLORATION: u64 = 2;
    pub const REPLAY: u64 = 3;
    pub const BASELINE: u64 = 4;

    /// Per-episode, per-slice workload stream.
    pub fn workload(episode: u64, slice: usize) -> u64 {
        (1 << 32) | (episode << 12) | slice as u64
    }
}
