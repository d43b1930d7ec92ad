//! Moving cached tensors between the fast and slow tiers.
//!
//! Three engines share one interface:
//!
//! * `Synchronous` copies inline; compute is paused for the copy.
//! * `AsyncOverlapped` hands the copy to a worker thread and returns a
//!   [`Ticket`] immediately; [`TierSwapper::await_ready`] blocks until done.
//! * `Simulated` models a single FIFO copy channel on the ledger's virtual
//!   clock: a transfer of `n` bytes takes `latency + n / bandwidth`. With
//!   `overlap` the transfer runs alongside compute, otherwise the clock is
//!   advanced through it inline.
//!
//! Every transfer appears in the ledger as `TierMoveStart` ... `TierMoveEnd`
//! and on the timeline as `XferStart` / `XferEnd`; waits appear as
//! `AwaitStart` / `AwaitEnd`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{Ledger, Tier, TimelineEvent, TimelineKind};
use crate::tensor::Tensor5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TransferEngine {
    Synchronous,
    AsyncOverlapped,
    Simulated {
        /// bytes per second
        bandwidth: f64,
        latency_s: f64,
        overlap: bool,
    },
}

impl TransferEngine {
    pub fn validate(&self) -> Result<()> {
        if let TransferEngine::Simulated {
            bandwidth,
            latency_s,
            ..
        } = *self
        {
            if !(bandwidth.is_finite() && bandwidth > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "bandwidth {bandwidth} must be > 0"
                )));
            }
            if !(latency_s.is_finite() && latency_s >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "latency {latency_s} must be ≥ 0"
                )));
            }
        }
        Ok(())
    }

    /// Simulated duration of moving `bytes`, in whole nanoseconds.
    pub fn duration_ns(&self, bytes: u64) -> u64 {
        match *self {
            TransferEngine::Simulated {
                bandwidth,
                latency_s,
                ..
            } => (latency_s * 1e9).round() as u64 + (bytes as f64 * 1e9 / bandwidth).ceil() as u64,
            _ => 0,
        }
    }
}

enum XferState {
    Pending,
    Done(Tensor5),
    Taken,
    Failed,
}

/// One in-flight move. Owns the tensor until it is settled.
pub struct Transfer {
    timeline_id: u64,
    bytes: u64,
    to: Tier,
    /// Completion time on the virtual clock (simulated engine only).
    end_ns: Option<u64>,
    awaited: AtomicBool,
    state: Mutex<XferState>,
    cv: Condvar,
}

impl Transfer {
    pub fn destination(&self) -> Tier {
        self.to
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    fn finish(&self, t: Option<Tensor5>) {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        *st = match t {
            Some(t) => XferState::Done(t),
            None => XferState::Failed,
        };
        self.cv.notify_all();
    }

    fn wait(&self) -> Result<()> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            match *st {
                XferState::Pending => st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner()),
                XferState::Failed => return Err(Error::EngineShutdown),
                _ => return Ok(()),
            }
        }
    }

    fn take(&self) -> Result<Tensor5> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        match std::mem::replace(&mut *st, XferState::Taken) {
            XferState::Done(t) => Ok(t),
            XferState::Failed => Err(Error::EngineShutdown),
            other => {
                *st = other;
                Err(Error::Cache("transfer not complete".into()))
            }
        }
    }
}

/// Handle for a prefetch. An empty ticket means nothing needed to move.
#[derive(Clone, Default)]
pub struct Ticket(Option<Arc<Transfer>>);

impl Ticket {
    pub fn is_noop(&self) -> bool {
        self.0.is_none()
    }
}

/// Where a cached tensor currently lives.
pub enum Slot {
    Resident(Tensor5),
    Moving(Arc<Transfer>),
    Empty,
}

impl Slot {
    /// Tier the entry is on, or heading to.
    pub fn tier(&self) -> Option<Tier> {
        match self {
            Slot::Resident(t) => t.ledger().tier_of(t.alloc_id()),
            Slot::Moving(x) => Some(x.to),
            Slot::Empty => None,
        }
    }

    pub fn is_moving(&self) -> bool {
        matches!(self, Slot::Moving(_))
    }

    pub fn tensor(&self) -> Option<&Tensor5> {
        match self {
            Slot::Resident(t) => Some(t),
            _ => None,
        }
    }
}

struct Job {
    xfer: Arc<Transfer>,
    tensor: Tensor5,
    step: Option<usize>,
}

struct Worker {
    tx: Option<Sender<Job>>,
    handle: Option<JoinHandle<()>>,
}

pub struct TierSwapper {
    engine: TransferEngine,
    ledger: Ledger,
    worker: Mutex<Option<Worker>>,
    /// Virtual time at which the simulated channel is next free.
    channel_free_ns: Mutex<u64>,
}

impl TierSwapper {
    pub fn new(engine: TransferEngine, ledger: &Ledger) -> Result<TierSwapper> {
        engine.validate()?;
        if matches!(engine, TransferEngine::Simulated { .. }) && !ledger.is_virtual() {
            return Err(Error::InvalidArgument(
                "the simulated engine needs a virtual clock".into(),
            ));
        }
        let worker = match engine {
            TransferEngine::AsyncOverlapped => Some(spawn_worker(Arc::clone(ledger))?),
            _ => None,
        };
        Ok(TierSwapper {
            engine,
            ledger: Arc::clone(ledger),
            worker: Mutex::new(worker),
            channel_free_ns: Mutex::new(0),
        })
    }

    pub fn engine(&self) -> TransferEngine {
        self.engine
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Start moving a fast-resident entry to the slow tier.
    pub fn evict(&self, slot: &mut Slot, step: Option<usize>) -> Result<()> {
        match slot {
            Slot::Empty => Err(Error::Cache("evict of an empty slot".into())),
            Slot::Moving(x) if x.to == Tier::Slow => Err(Error::AlreadyOnTier(Tier::Slow)),
            Slot::Moving(_) => {
                self.settle(slot)?;
                self.evict(slot, step)
            }
            Slot::Resident(_) => {
                if slot.tier() == Some(Tier::Slow) {
                    return Err(Error::AlreadyOnTier(Tier::Slow));
                }
                self.start(slot, Tier::Slow, step)
            }
        }
    }

    /// Start moving an entry back to the fast tier ahead of its use at
    /// `needed_at_step`. A no-op ticket comes back if it is already there.
    pub fn prefetch(
        &self,
        slot: &mut Slot,
        needed_at_step: usize,
        current_step: usize,
    ) -> Result<Ticket> {
        if needed_at_step < current_step {
            return Err(Error::InvalidArgument(format!(
                "prefetch for step {needed_at_step} issued at step {current_step}"
            )));
        }
        match slot {
            Slot::Empty => Err(Error::Cache("prefetch of an empty slot".into())),
            Slot::Moving(x) if x.to == Tier::Fast => Ok(Ticket(Some(Arc::clone(x)))),
            Slot::Moving(_) => {
                self.settle(slot)?;
                self.prefetch(slot, needed_at_step, current_step)
            }
            Slot::Resident(_) => {
                if slot.tier() == Some(Tier::Fast) {
                    return Ok(Ticket(None));
                }
                self.start(slot, Tier::Fast, Some(current_step))?;
                Ok(match slot {
                    Slot::Moving(x) => Ticket(Some(Arc::clone(x))),
                    _ => Ticket(None),
                })
            }
        }
    }

    /// Block until the ticket's transfer is complete. Idempotent.
    pub fn await_ready(&self, ticket: &Ticket) -> Result<()> {
        let Some(x) = &ticket.0 else { return Ok(()) };
        if x.awaited.swap(true, Ordering::SeqCst) {
            return x.wait();
        }
        let paused = self.ledger.pause_compute();
        let id = self.ledger.next_timeline_id();
        let start = self.ledger.now_ns();
        self.timeline(TimelineKind::AwaitStart, None, x.bytes, start, id);
        if let Some(end) = x.end_ns {
            self.ledger.advance_to(end);
        }
        let res = x.wait();
        let end = self.ledger.now_ns();
        self.timeline(TimelineKind::AwaitEnd, None, x.bytes, end, id);
        self.ledger.resume_compute(paused);
        res
    }

    /// Wait for any in-flight move on `slot` and make it resident again.
    pub fn settle(&self, slot: &mut Slot) -> Result<()> {
        if let Slot::Moving(x) = slot {
            let x = Arc::clone(x);
            self.await_ready(&Ticket(Some(Arc::clone(&x))))?;
            *slot = Slot::Resident(x.take()?);
        }
        Ok(())
    }

    /// Stop the worker after draining queued transfers. Later moves fail
    /// with [`Error::EngineShutdown`].
    pub fn shutdown(&self) {
        let w = self.worker.lock().unwrap_or_else(|e| e.into_inner()).take();
        if let Some(mut w) = w {
            drop(w.tx.take());
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
        }
    }

    fn timeline(&self, kind: TimelineKind, step: Option<usize>, bytes: u64, at: u64, id: u64) {
        self.ledger.push_timeline(TimelineEvent {
            kind,
            step,
            bytes,
            clock_ns: at,
            id,
        });
    }

    fn start(&self, slot: &mut Slot, to: Tier, step: Option<usize>) -> Result<()> {
        let Slot::Resident(t) = slot else {
            return Err(Error::Cache("start of a non-resident slot".into()));
        };
        if matches!(self.engine, TransferEngine::AsyncOverlapped)
            && self
                .worker
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .is_none()
        {
            return Err(Error::EngineShutdown);
        }
        let (id, bytes) = (t.alloc_id(), t.bytes());
        self.ledger.move_start(id, to)?;
        let Slot::Resident(mut tensor) = std::mem::replace(slot, Slot::Empty) else {
            unreachable!()
        };
        let tl_id = self.ledger.next_timeline_id();
        match self.engine {
            TransferEngine::Synchronous => {
                let paused = self.ledger.pause_compute();
                self.timeline(
                    TimelineKind::XferStart,
                    step,
                    bytes,
                    self.ledger.now_ns(),
                    tl_id,
                );
                tensor.rehome();
                self.ledger.move_end(id)?;
                self.timeline(
                    TimelineKind::XferEnd,
                    step,
                    bytes,
                    self.ledger.now_ns(),
                    tl_id,
                );
                self.ledger.resume_compute(paused);
                *slot = Slot::Resident(tensor);
            }
            TransferEngine::Simulated { overlap, .. } => {
                let now = self.ledger.now_ns();
                let (begin, end) = {
                    let mut free = self
                        .channel_free_ns
                        .lock()
                        .unwrap_or_else(|e| e.into_inner());
                    let begin = now.max(*free);
                    let end = begin + self.engine.duration_ns(bytes);
                    *free = end;
                    (begin, end)
                };
                tensor.rehome();
                self.timeline(TimelineKind::XferStart, step, bytes, begin, tl_id);
                self.timeline(TimelineKind::XferEnd, step, bytes, end, tl_id);
                self.ledger.schedule_move_end(id, end);
                if overlap {
                    let x = Arc::new(Transfer {
                        timeline_id: tl_id,
                        bytes,
                        to,
                        end_ns: Some(end),
                        awaited: AtomicBool::new(false),
                        state: Mutex::new(XferState::Done(tensor)),
                        cv: Condvar::new(),
                    });
                    *slot = Slot::Moving(x);
                } else {
                    let paused = self.ledger.pause_compute();
                    self.ledger.advance_to(end);
                    self.ledger.resume_compute(paused);
                    *slot = Slot::Resident(tensor);
                }
            }
            TransferEngine::AsyncOverlapped => {
                let x = Arc::new(Transfer {
                    timeline_id: tl_id,
                    bytes,
                    to,
                    end_ns: None,
                    awaited: AtomicBool::new(false),
                    state: Mutex::new(XferState::Pending),
                    cv: Condvar::new(),
                });
                let job = Job {
                    xfer: Arc::clone(&x),
                    tensor,
                    step,
                };
                let guard = self.worker.lock().unwrap_or_else(|e| e.into_inner());
                let sent = guard
                    .as_ref()
                    .and_then(|w| w.tx.as_ref())
                    .map(|tx| tx.send(job));
                match sent {
                    Some(Ok(())) => *slot = Slot::Moving(x),
                    Some(Err(e)) => {
                        // Worker gone: finish the move inline so the ledger
                        // stays consistent, then report the shutdown.
                        let Job { mut tensor, .. } = e.0;
                        tensor.rehome();
                        self.ledger.move_end(id)?;
                        *slot = Slot::Resident(tensor);
                        return Err(Error::EngineShutdown);
                    }
                    None => unreachable!(),
                }
            }
        }
        Ok(())
    }
}

impl Drop for TierSwapper {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn spawn_worker(ledger: Ledger) -> Result<Worker> {
    let (tx, rx) = channel::<Job>();
    let handle = std::thread::Builder::new()
        .name("tier-copy".into())
        .spawn(move || {
            for Job {
                xfer,
                mut tensor,
                step,
            } in rx
            {
                let push = |kind, at| {
                    ledger.push_timeline(TimelineEvent {
                        kind,
                        step,
                        bytes: xfer.bytes,
                        clock_ns: at,
                        id: xfer.timeline_id,
                    })
                };
                push(TimelineKind::XferStart, ledger.now_ns());
                tensor.rehome();
                match ledger.move_end(tensor.alloc_id()) {
                    Ok(()) => {
                        push(TimelineKind::XferEnd, ledger.now_ns());
                        xfer.finish(Some(tensor));
                    }
                    Err(_) => {
                        push(TimelineKind::XferEnd, ledger.now_ns());
                        xfer.finish(None);
                        drop(tensor);
                    }
                }
            }
        })?;
    Ok(Worker {
        tx: Some(tx),
        handle: Some(handle),
    })
}

fn paired_spans(timeline: &[TimelineEvent]) -> Result<Vec<(TimelineKind, u64, u64)>> {
    let mut open: HashMap<u64, (TimelineKind, u64)> = HashMap::new();
    let mut spans = Vec::new();
    for e in timeline {
        let (is_start, base) = match e.kind {
            TimelineKind::ComputeStart => (true, TimelineKind::ComputeStart),
            TimelineKind::ComputeEnd => (false, TimelineKind::ComputeStart),
            TimelineKind::XferStart => (true, TimelineKind::XferStart),
            TimelineKind::XferEnd => (false, TimelineKind::XferStart),
            TimelineKind::AwaitStart => (true, TimelineKind::AwaitStart),
            TimelineKind::AwaitEnd => (false, TimelineKind::AwaitStart),
        };
        if is_start {
            if open.insert(e.id, (base, e.clock_ns)).is_some() {
                return Err(Error::Timeline(format!("span {} started twice", e.id)));
            }
        } else {
            match open.remove(&e.id) {
                Some((k, s)) if k == base => {
                    if e.clock_ns < s {
                        return Err(Error::Timeline(format!(
                            "span {} ends before it starts",
                            e.id
                        )));
                    }
                    spans.push((base, s, e.clock_ns));
                }
                _ => {
                    return Err(Error::Timeline(format!(
                        "unmatched {:?} for span {}",
                        e.kind, e.id
                    )))
                }
            }
        }
    }
    if let Some((id, (k, _))) = open.into_iter().next() {
        return Err(Error::Timeline(format!("{k:?} of span {id} never ended")));
    }
    Ok(spans)
}

/// Last end minus first start over all spans, in nanoseconds.
pub fn makespan_ns(timeline: &[TimelineEvent]) -> Result<u64> {
    let spans = paired_spans(timeline)?;
    let first = spans.iter().map(|s| s.1).min();
    let last = spans.iter().map(|s| s.2).max();
    Ok(match (first, last) {
        (Some(a), Some(b)) => b - a,
        _ => 0,
    })
}

/// Total time spent waiting on transfers, in nanoseconds.
pub fn stall_total_ns(timeline: &[TimelineEvent]) -> Result<u64> {
    Ok(paired_spans(timeline)?
        .iter()
        .filter(|s| s.0 == TimelineKind::AwaitStart)
        .map(|s| s.2 - s.1)
        .sum())
}

pub fn makespan(timeline: &[TimelineEvent]) -> Result<f64> {
    Ok(makespan_ns(timeline)? as f64 * 1e-9)
}

pub fn stall_total(timeline: &[TimelineEvent]) -> Result<f64> {
    Ok(stall_total_ns(timeline)? as f64 * 1e-9)
}
