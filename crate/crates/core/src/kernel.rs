//! Discrete-event kernel: virtual clock, `(time, seq)`-ordered queue and the
//! run loop.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{HardComponent, MaterialClass, CLASS_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    ServiceStart,
    ServiceEnd,
    ErrorInjected,
    Classified,
    ComponentRemoved,
    Deposited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Station {
    Conveyor,
    Camera,
    Arm,
    Laser,
    Bin,
}

impl Station {
    /// Processing stations in topology order; the bin is terminal.
    pub const PIPELINE: [Station; 4] = [
        Station::Conveyor,
        Station::Camera,
        Station::Arm,
        Station::Laser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Station::Conveyor => "conveyor",
            Station::Camera => "camera",
            Station::Arm => "arm",
            Station::Laser => "laser",
            Station::Bin => "bin",
        }
    }

    pub fn next(self) -> Station {
        match self {
            Station::Conveyor => Station::Camera,
            Station::Camera => Station::Arm,
            Station::Arm => Station::Laser,
            Station::Laser | Station::Bin => Station::Bin,
        }
    }
}

/// Kind-specific data. Serialized untagged; variants are ordered so that
/// deserialization picks the most specific match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Classified {
        predicted: MaterialClass,
        scores: [f64; CLASS_COUNT],
    },
    Service {
        attempt: u32,
        duration: f64,
    },
    Error {
        attempt: u32,
    },
    Component {
        component: HardComponent,
    },
    Deposit {
        bin: MaterialClass,
    },
    Empty {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    /// Assigned by the queue on scheduling.
    pub seq: u64,
    pub kind: EventKind,
    pub garment_id: u64,
    pub station: Station,
    pub payload: Payload,
}

impl SimEvent {
    pub fn new(
        time: f64,
        kind: EventKind,
        garment_id: u64,
        station: Station,
        payload: Payload,
    ) -> Self {
        SimEvent {
            time,
            seq: 0,
            kind,
            garment_id,
            station,
            payload,
        }
    }

    /// One JSON object with `time` rendered to three decimals.
    pub fn to_json_line(&self) -> String {
        let mut s = String::with_capacity(128);
        write!(
            s,
            "{{\"time\":{:.3},\"seq\":{},\"kind\":{},\"garment_id\":{},\"station\":{},\"payload\":{}}}",
            self.time,
            self.seq,
            serde_json::to_string(&self.kind).expect("kind"),
            self.garment_id,
            serde_json::to_string(&self.station).expect("station"),
            serde_json::to_string(&self.payload).expect("payload"),
        )
        .expect("write to string");
        s
    }
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(
        "event {kind:?} for garment {garment_id} scheduled at t={time} before clock t={clock}"
    )]
    PastEvent {
        kind: EventKind,
        garment_id: u64,
        time: f64,
        clock: f64,
    },
    #[error("event time {0} is not a finite non-negative number")]
    BadTime(f64),
    #[error("handler failed at trace position {position}: {source}")]
    Handler {
        position: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("handler scheduled into the past at trace position {position}: {source}")]
    Causality {
        position: usize,
        #[source]
        source: Box<KernelError>,
    },
}

struct Entry(SimEvent);

impl Entry {
    fn key(&self) -> (f64, u64) {
        (self.0.time, self.0.seq)
    }
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        let (ta, sa) = self.key();
        let (tb, sb) = other.key();
        ta.total_cmp(&tb).then(sa.cmp(&sb))
    }
}

/// Pending events ordered by `(time, seq)`; equal times dequeue in insertion
/// order.
#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<Entry>>,
    clock: f64,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Enqueues `event`, overwriting its `seq`. Returns the assigned seq.
    pub fn schedule(&mut self, mut event: SimEvent) -> Result<u64, KernelError> {
        if !(event.time.is_finite() && event.time >= 0.0) {
            return Err(KernelError::BadTime(event.time));
        }
        if event.time < self.clock {
            return Err(KernelError::PastEvent {
                kind: event.kind,
                garment_id: event.garment_id,
                time: event.time,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        event.seq = seq;
        self.heap.push(Reverse(Entry(event)));
        Ok(seq)
    }

    /// Dequeues the earliest event and advances the clock to it.
    pub fn next_event(&mut self) -> Option<SimEvent> {
        let Reverse(Entry(event)) = self.heap.pop()?;
        self.clock = event.time;
        Some(event)
    }
}

/// Processed events in dispatch order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub events: Vec<SimEvent>,
    pub clock: f64,
}

impl EventTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_json_line());
            out.push('\n');
        }
        out
    }
}

/// Handle given to handlers for scheduling follow-up events.
pub struct Scheduler<'a> {
    queue: &'a mut EventQueue,
}

impl Scheduler<'_> {
    pub fn now(&self) -> f64 {
        self.queue.now()
    }

    pub fn schedule(&mut self, event: SimEvent) -> Result<u64, KernelError> {
        self.queue.schedule(event)
    }
}

pub type HandlerResult = Result<(), Box<dyn std::error::Error + Send + Sync>>;

/// Dispatches events in `(time, seq)` order until the queue drains.
///
/// `handler` receives every event and matches on its kind. A handler that
/// schedules into the past aborts the run with the offending trace position.
pub fn run_to_completion<H>(
    initial: Vec<SimEvent>,
    mut handler: H,
) -> Result<EventTrace, KernelError>
where
    H: FnMut(&SimEvent, &mut Scheduler<'_>) -> HandlerResult,
{
    let mut queue = EventQueue::new();
    for event in initial {
        queue.schedule(event)?;
    }
    let mut trace = EventTrace::default();
    while let Some(event) = queue.next_event() {
        let position = trace.events.len();
        let mut sched = Scheduler { queue: &mut queue };
        if let Err(source) = handler(&event, &mut sched) {
            return Err(match source.downcast::<KernelError>() {
                Ok(kernel) => KernelError::Causality {
                    position,
                    source: kernel,
                },
                Err(source) => KernelError::Handler { position, source },
            });
        }
        trace.events.push(event);
    }
    trace.clock = queue.now();
    Ok(trace)
}
