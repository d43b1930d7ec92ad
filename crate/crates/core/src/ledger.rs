//! Event-sourced memory accountant.
//!
//! Every tensor allocation, free and tier transfer in the engine is appended
//! to a [`MemLedger`] as a [`MemEvent`] tagged with the pipeline stage that
//! was current when it happened. Occupancy and per-(stage, tier) peaks are
//! maintained incrementally, and the raw event log is kept so peaks can be
//! recomputed and audited after the fact (see [`peaks_from_csv`]).
//!
//! While a tier move is in flight its bytes are counted on *both* tiers:
//! `TierMoveStart` adds them to the destination, `TierMoveEnd` removes them
//! from the source.
//!
//! The ledger also owns the run clock (real monotonic time or a virtual
//! nanosecond counter driven by multiply-accumulate charges), the
//! compute/transfer timeline and the operation counters.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{BudgetExceeded, Error, Result};

pub type AllocId = u64;

/// Shared handle to a ledger. Tensors keep one so their drop is recorded.
pub type Ledger = Arc<MemLedger>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Fast,
    Slow,
}

impl Tier {
    pub const ALL: [Tier; 2] = [Tier::Fast, Tier::Slow];

    fn index(self) -> usize {
        match self {
            Tier::Fast => 0,
            Tier::Slow => 1,
        }
    }

    pub fn other(self) -> Tier {
        match self {
            Tier::Fast => Tier::Slow,
            Tier::Slow => Tier::Fast,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Fast => "fast",
            Tier::Slow => "slow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Setup,
    Encode,
    Denoise,
    Decode,
}

impl StageTag {
    pub const ALL: [StageTag; 4] = [
        StageTag::Setup,
        StageTag::Encode,
        StageTag::Denoise,
        StageTag::Decode,
    ];

    fn index(self) -> usize {
        match self {
            StageTag::Setup => 0,
            StageTag::Encode => 1,
            StageTag::Denoise => 2,
            StageTag::Decode => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Setup => "setup",
            StageTag::Encode => "encode",
            StageTag::Denoise => "denoise",
            StageTag::Decode => "decode",
        }
    }

    pub fn parse(s: &str) -> Option<StageTag> {
        StageTag::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Alloc,
    Free,
    TierMoveStart,
    TierMoveEnd,
    StageEnter,
}

/// One ledger entry. `tier` is the tier whose occupancy the event changes
/// (destination for `TierMoveStart`, source for `TierMoveEnd`) and
/// `occupancy` is that tier's occupancy right after the event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub bytes: u64,
    pub tier: Tier,
    pub stage: StageTag,
    pub alloc_id: AllocId,
    pub clock_ns: u64,
    pub occupancy: u64,
}

/// An event as submitted to [`MemLedger::record`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    Alloc { bytes: u64 },
    Free { id: AllocId },
    MoveStart { id: AllocId, to: Tier },
    MoveEnd { id: AllocId },
    StageEnter(StageTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Real,
    Virtual { ns_per_mac: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimelineKind {
    ComputeStart,
    ComputeEnd,
    XferStart,
    XferEnd,
    AwaitStart,
    AwaitEnd,
}

/// Compute/transfer timeline entry. `id` pairs Start and End events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub kind: TimelineKind,
    pub step: Option<usize>,
    pub bytes: u64,
    pub clock_ns: u64,
    pub id: u64,
}

/// Per-(stage, tier) peak bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PeakTable([[u64; 2]; 4]);

impl PeakTable {
    pub fn get(&self, stage: StageTag, tier: Tier) -> u64 {
        self.0[stage.index()][tier.index()]
    }

    fn bump(&mut self, stage: StageTag, current: [u64; 2]) {
        let row = &mut self.0[stage.index()];
        for t in 0..2 {
            row[t] = row[t].max(current[t]);
        }
    }

    pub fn overall(&self, tier: Tier) -> u64 {
        StageTag::ALL
            .iter()
            .map(|&s| self.get(s, tier))
            .max()
            .unwrap_or(0)
    }

    /// `{stage: {fast, slow}}` view used by the JSON exports.
    pub fn to_map(&self) -> BTreeMap<String, TierBytes> {
        StageTag::ALL
            .iter()
            .map(|&s| {
                (
                    s.as_str().to_string(),
                    TierBytes {
                        fast: self.get(s, Tier::Fast),
                        slow: self.get(s, Tier::Slow),
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierBytes {
    pub fast: u64,
    pub slow: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub peaks: PeakTable,
    pub current: TierBytes,
    pub events_per_stage: BTreeMap<String, u64>,
}

impl StageReport {
    pub fn peak(&self, stage: StageTag, tier: Tier) -> u64 {
        self.peaks.get(stage, tier)
    }

    pub fn overall_peak(&self, tier: Tier) -> u64 {
        self.peaks.overall(tier)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockStat {
    pub executions: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy)]
struct LiveAlloc {
    bytes: u64,
    tier: Tier,
    moving_to: Option<Tier>,
}

enum ClockState {
    Real(Instant),
    Virtual { now_ns: u64, ns_per_mac: u64 },
}

struct Inner {
    events: Vec<MemEvent>,
    live: HashMap<AllocId, LiveAlloc>,
    current: [u64; 2],
    peaks: PeakTable,
    events_per_stage: [u64; 4],
    stage: StageTag,
    budget_fast: Option<u64>,
    next_id: AllocId,
    clock: ClockState,
    scheduled: Vec<(u64, AllocId)>,
    timeline: Vec<TimelineEvent>,
    next_timeline_id: u64,
    open_compute: Option<(Option<usize>, u64)>,
    macs_total: u64,
    blocks: BTreeMap<String, BlockStat>,
    violations: Vec<String>,
}

/// Thread-safe event log. All appends go through one mutex, so events are
/// totally ordered by `seq` even when the transfer worker records
/// concurrently with the pipeline driver.
pub struct MemLedger {
    inner: Mutex<Inner>,
}

impl fmt::Debug for MemLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = self.lock();
        f.debug_struct("MemLedger")
            .field("events", &g.events.len())
            .field("stage", &g.stage)
            .field("current", &g.current)
            .finish()
    }
}

impl MemLedger {
    pub fn new(clock: ClockMode) -> Ledger {
        let clock = match clock {
            ClockMode::Real => ClockState::Real(Instant::now()),
            ClockMode::Virtual { ns_per_mac } => ClockState::Virtual {
                now_ns: 0,
                ns_per_mac,
            },
        };
        Arc::new(MemLedger {
            inner: Mutex::new(Inner {
                events: Vec::new(),
                live: HashMap::new(),
                current: [0; 2],
                peaks: PeakTable::default(),
                events_per_stage: [0; 4],
                stage: StageTag::Setup,
                budget_fast: None,
                next_id: 1,
                clock,
                scheduled: Vec::new(),
                timeline: Vec::new(),
                next_timeline_id: 1,
                open_compute: None,
                macs_total: 0,
                blocks: BTreeMap::new(),
                violations: Vec::new(),
            }),
        })
    }

    /// Real-clock ledger, the common case in tests.
    pub fn real() -> Ledger {
        Self::new(ClockMode::Real)
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // A panic while holding the lock leaves the log consistent (events are
        // appended last), so poisoning is ignored.
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Abort any later event that would push fast occupancy above `limit`.
    pub fn enforce_budget(&self, limit_fast: u64) -> Result<()> {
        if limit_fast == 0 {
            return Err(Error::InvalidArgument(
                "fast-tier budget must be > 0".into(),
            ));
        }
        self.lock().budget_fast = Some(limit_fast);
        Ok(())
    }

    pub fn clear_budget(&self) {
        self.lock().budget_fast = None;
    }

    pub fn stage(&self) -> StageTag {
        self.lock().stage
    }

    pub fn enter_stage(&self, stage: StageTag) {
        self.record(Record::StageEnter(stage))
            .expect("stage transitions cannot fail");
    }

    pub fn alloc(&self, bytes: u64) -> Result<AllocId> {
        let mut g = self.lock();
        g.pump();
        g.apply(Record::Alloc { bytes })
    }

    pub fn free(&self, id: AllocId) -> Result<()> {
        self.record(Record::Free { id }).map(|_| ())
    }

    pub fn move_start(&self, id: AllocId, to: Tier) -> Result<()> {
        self.record(Record::MoveStart { id, to }).map(|_| ())
    }

    pub fn move_end(&self, id: AllocId) -> Result<()> {
        self.record(Record::MoveEnd { id }).map(|_| ())
    }

    /// Append one event. Returns the new event's `seq`.
    pub fn record(&self, rec: Record) -> Result<u64> {
        let mut g = self.lock();
        g.pump();
        g.apply(rec)?;
        Ok(g.events.last().map(|e| e.seq).unwrap_or(0))
    }

    /// Called from `Drop`; failures are kept as invariant violations.
    pub(crate) fn release(&self, id: AllocId) {
        let mut g = self.lock();
        g.pump();
        if let Err(e) = g.apply(Record::Free { id }) {
            g.violations.push(format!("free of alloc {id} failed: {e}"));
        }
    }

    pub fn violations(&self) -> Vec<String> {
        self.lock().violations.clone()
    }

    pub fn tier_of(&self, id: AllocId) -> Option<Tier> {
        self.lock().live.get(&id).map(|l| l.tier)
    }

    pub fn occupancy(&self, tier: Tier) -> u64 {
        self.lock().current[tier.index()]
    }

    pub fn live_count(&self) -> usize {
        self.lock().live.len()
    }

    pub fn report(&self) -> StageReport {
        let g = self.lock();
        StageReport {
            peaks: g.peaks,
            current: TierBytes {
                fast: g.current[0],
                slow: g.current[1],
            },
            events_per_stage: StageTag::ALL
                .iter()
                .map(|s| (s.as_str().to_string(), g.events_per_stage[s.index()]))
                .collect(),
        }
    }

    pub fn peak(&self, stage: StageTag, tier: Tier) -> u64 {
        self.lock().peaks.get(stage, tier)
    }

    pub fn overall_peak(&self, tier: Tier) -> u64 {
        self.lock().peaks.overall(tier)
    }

    pub fn events(&self) -> Vec<MemEvent> {
        self.lock().events.clone()
    }

    pub fn event_count(&self) -> usize {
        self.lock().events.len()
    }

    /// Σ alloc bytes − Σ free bytes over the whole log.
    pub fn balance(&self) -> i128 {
        let g = self.lock();
        g.events
            .iter()
            .map(|e| match e.kind {
                EventKind::Alloc => e.bytes as i128,
                EventKind::Free => -(e.bytes as i128),
                _ => 0,
            })
            .sum()
    }

    // ---- clock -------------------------------------------------------

    pub fn is_virtual(&self) -> bool {
        matches!(self.lock().clock, ClockState::Virtual { .. })
    }

    pub fn now_ns(&self) -> u64 {
        self.lock().now_ns()
    }

    /// Advance the virtual clock. No-op on a real clock.
    pub fn advance_ns(&self, ns: u64) {
        let mut g = self.lock();
        if let ClockState::Virtual { now_ns, .. } = &mut g.clock {
            *now_ns += ns;
        }
        g.pump();
    }

    /// Advance the virtual clock to `at_ns` if it is in the future.
    pub fn advance_to(&self, at_ns: u64) {
        let mut g = self.lock();
        if let ClockState::Virtual { now_ns, .. } = &mut g.clock {
            *now_ns = (*now_ns).max(at_ns);
        }
        g.pump();
    }

    /// Queue a `TierMoveEnd` to be applied once the virtual clock reaches
    /// `at_ns`.
    pub fn schedule_move_end(&self, id: AllocId, at_ns: u64) {
        let mut g = self.lock();
        g.scheduled.push((at_ns, id));
        g.pump();
    }

    pub fn has_scheduled(&self, id: AllocId) -> bool {
        self.lock().scheduled.iter().any(|&(_, i)| i == id)
    }

    /// Count `macs` multiply-accumulates against `label`; on a virtual clock
    /// time advances by `macs * ns_per_mac`.
    pub fn charge_macs(&self, label: Option<&str>, macs: u64) {
        let mut g = self.lock();
        g.macs_total += macs;
        if let Some(label) = label {
            g.blocks.entry(label.to_string()).or_default().macs += macs;
        }
        if let ClockState::Virtual { now_ns, ns_per_mac } = &mut g.clock {
            *now_ns += macs * *ns_per_mac;
        }
        g.pump();
    }

    /// Count one execution of a named block.
    pub fn note_block(&self, label: &str) {
        self.lock()
            .blocks
            .entry(label.to_string())
            .or_default()
            .executions += 1;
    }

    pub fn macs_total(&self) -> u64 {
        self.lock().macs_total
    }

    pub fn block_stats(&self) -> BTreeMap<String, BlockStat> {
        self.lock().blocks.clone()
    }

    pub fn block_stat(&self, label: &str) -> BlockStat {
        self.lock().blocks.get(label).copied().unwrap_or_default()
    }

    // ---- timeline ----------------------------------------------------

    pub fn next_timeline_id(&self) -> u64 {
        let mut g = self.lock();
        let id = g.next_timeline_id;
        g.next_timeline_id += 1;
        id
    }

    pub fn push_timeline(&self, ev: TimelineEvent) {
        self.lock().timeline.push(ev);
    }

    pub fn timeline(&self) -> Vec<TimelineEvent> {
        self.lock().timeline.clone()
    }

    pub fn begin_compute(&self, step: Option<usize>) {
        let mut g = self.lock();
        g.close_compute();
        let id = g.next_timeline_id;
        g.next_timeline_id += 1;
        let now = g.now_ns();
        g.timeline.push(TimelineEvent {
            kind: TimelineKind::ComputeStart,
            step,
            bytes: 0,
            clock_ns: now,
            id,
        });
        g.open_compute = Some((step, id));
    }

    pub fn end_compute(&self) {
        self.lock().close_compute();
    }

    /// Close the open compute span (if any) so a blocking transfer lands in
    /// a gap. Returns the step to hand back to [`resume_compute`].
    ///
    /// [`resume_compute`]: MemLedger::resume_compute
    pub fn pause_compute(&self) -> Option<Option<usize>> {
        let mut g = self.lock();
        let step = g.open_compute.map(|(s, _)| s);
        g.close_compute();
        step
    }

    pub fn resume_compute(&self, paused: Option<Option<usize>>) {
        if let Some(step) = paused {
            self.begin_compute(step);
        }
    }

    // ---- export ------------------------------------------------------

    /// JSON summary of the ledger.
    pub fn summary(&self) -> LedgerSummary {
        let report = self.report();
        let timeline = self.timeline();
        let g = self.lock();
        let clock = match g.clock {
            ClockState::Real(_) => "real",
            ClockState::Virtual { .. } => "virtual",
        };
        LedgerSummary {
            clock: clock.to_string(),
            peaks: report.peaks.to_map(),
            overall: TierBytes {
                fast: report.peaks.overall(Tier::Fast),
                slow: report.peaks.overall(Tier::Slow),
            },
            events_per_stage: report.events_per_stage,
            event_count: g.events.len() as u64,
            macs_total: g.macs_total,
            blocks: g.blocks.clone(),
            makespan_s: crate::swap::makespan_ns(&timeline).unwrap_or(0) as f64 * 1e-9,
            stall_s: crate::swap::stall_total_ns(&timeline).unwrap_or(0) as f64 * 1e-9,
            transfers: timeline
                .iter()
                .filter(|e| e.kind == TimelineKind::XferEnd)
                .count() as u64,
        }
    }

    /// Occupancy timeline as CSV: `seq,clock,tier,occupancy_bytes,stage`.
    pub fn timeline_csv(&self) -> String {
        let g = self.lock();
        let mut out = String::from("seq,clock,tier,occupancy_bytes,stage\n");
        for e in &g.events {
            out.push_str(&format!(
                "{},{:.9},{},{},{}\n",
                e.seq,
                e.clock_ns as f64 * 1e-9,
                e.tier.as_str(),
                e.occupancy,
                e.stage
            ));
        }
        out
    }

    /// Write the JSON summary and the CSV occupancy timeline.
    pub fn export(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let summary = self.summary();
        let mut f = std::fs::File::create(json_path)?;
        serde_json::to_writer_pretty(&mut f, &summary)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        f.write_all(b"\n")?;
        std::fs::write(csv_path, self.timeline_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub clock: String,
    pub peaks: BTreeMap<String, TierBytes>,
    pub overall: TierBytes,
    pub events_per_stage: BTreeMap<String, u64>,
    pub event_count: u64,
    pub macs_total: u64,
    pub blocks: BTreeMap<String, BlockStat>,
    pub makespan_s: f64,
    pub stall_s: f64,
    pub transfers: u64,
}

/// Recompute per-(stage, tier) peaks from an exported occupancy CSV.
pub fn peaks_from_csv(csv: &str) -> Result<PeakTable> {
    let mut lines = csv.lines();
    match lines.next() {
        Some(h) if h.trim() == "seq,clock,tier,occupancy_bytes,stage" => {}
        other => return Err(Error::Ledger(format!("unexpected CSV header {other:?}"))),
    }
    let mut current = [0u64; 2];
    let mut peaks = PeakTable::default();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::Ledger(format!("malformed CSV row {}: {line}", n + 2));
        if cols.len() != 5 {
            return Err(bad());
        }
        let tier = match cols[2] {
            "fast" => Tier::Fast,
            "slow" => Tier::Slow,
            _ => return Err(bad()),
        };
        let occ: u64 = cols[3].parse().map_err(|_| bad())?;
        let stage = StageTag::parse(cols[4]).ok_or_else(bad)?;
        current[tier.index()] = occ;
        peaks.bump(stage, current);
    }
    Ok(peaks)
}

impl Inner {
    fn now_ns(&self) -> u64 {
        match &self.clock {
            ClockState::Real(start) => start.elapsed().as_nanos() as u64,
            ClockState::Virtual { now_ns, .. } => *now_ns,
        }
    }

    /// Apply scheduled virtual-time move completions that are now due, in
    /// completion-time order, stamping each with its own completion time.
    fn pump(&mut self) {
        if self.scheduled.is_empty() {
            return;
        }
        let now = self.now_ns();
        self.scheduled.sort_by_key(|&(at, id)| (at, id));
        while let Some(&(at, id)) = self.scheduled.first() {
            if at > now {
                break;
            }
            self.scheduled.remove(0);
            if let Err(e) = self.apply_at(Record::MoveEnd { id }, at) {
                self.violations
                    .push(format!("scheduled move end of {id} failed: {e}"));
            }
        }
    }

    fn apply(&mut self, rec: Record) -> Result<AllocId> {
        let now = self.now_ns();
        self.apply_at(rec, now)
    }

    fn apply_at(&mut self, rec: Record, clock_ns: u64) -> Result<AllocId> {
        let stage = self.stage;
        let (kind, bytes, tier, id) = match rec {
            Record::Alloc { bytes } => {
                self.check_budget(bytes)?;
                let id = self.next_id;
                self.next_id += 1;
                self.live.insert(
                    id,
                    LiveAlloc {
                        bytes,
                        tier: Tier::Fast,
                        moving_to: None,
                    },
                );
                self.current[0] += bytes;
                (EventKind::Alloc, bytes, Tier::Fast, id)
            }
            Record::Free { id } => {
                let la = *self
                    .live
                    .get(&id)
                    .ok_or_else(|| Error::Ledger(format!("free of unknown alloc {id}")))?;
                if la.moving_to.is_some() {
                    return Err(Error::Ledger(format!(
                        "free of alloc {id} while a tier move is in flight"
                    )));
                }
                let cur = &mut self.current[la.tier.index()];
                *cur = cur
                    .checked_sub(la.bytes)
                    .ok_or_else(|| Error::Ledger(format!("negative occupancy freeing {id}")))?;
                self.live.remove(&id);
                (EventKind::Free, la.bytes, la.tier, id)
            }
            Record::MoveStart { id, to } => {
                let la = *self
                    .live
                    .get(&id)
                    .ok_or_else(|| Error::Ledger(format!("move of unknown alloc {id}")))?;
                if la.moving_to.is_some() {
                    return Err(Error::Ledger(format!("alloc {id} is already moving")));
                }
                if la.tier == to {
                    return Err(Error::AlreadyOnTier(to));
                }
                if to == Tier::Fast {
                    self.check_budget(la.bytes)?;
                }
                self.current[to.index()] += la.bytes;
                self.live.get_mut(&id).unwrap().moving_to = Some(to);
                (EventKind::TierMoveStart, la.bytes, to, id)
            }
            Record::MoveEnd { id } => {
                let la = *self
                    .live
                    .get(&id)
                    .ok_or_else(|| Error::Ledger(format!("move end of unknown alloc {id}")))?;
                let to = la
                    .moving_to
                    .ok_or_else(|| Error::Ledger(format!("alloc {id} is not moving")))?;
                let from = la.tier;
                let cur = &mut self.current[from.index()];
                *cur = cur
                    .checked_sub(la.bytes)
                    .ok_or_else(|| Error::Ledger(format!("negative occupancy moving {id}")))?;
                let entry = self.live.get_mut(&id).unwrap();
                entry.tier = to;
                entry.moving_to = None;
                (EventKind::TierMoveEnd, la.bytes, from, id)
            }
            Record::StageEnter(s) => {
                self.stage = s;
                (EventKind::StageEnter, 0, Tier::Fast, 0)
            }
        };
        let stage = if kind == EventKind::StageEnter {
            self.stage
        } else {
            stage
        };
        let seq = self.events.len() as u64;
        let occupancy = self.current[tier.index()];
        self.events.push(MemEvent {
            seq,
            kind,
            bytes,
            tier,
            stage,
            alloc_id: id,
            clock_ns,
            occupancy,
        });
        self.events_per_stage[stage.index()] += 1;
        self.peaks.bump(stage, self.current);
        Ok(id)
    }

    fn check_budget(&self, extra: u64) -> Result<()> {
        if let Some(limit) = self.budget_fast {
            if self.current[0] + extra > limit {
                return Err(Error::Budget(BudgetExceeded {
                    stage: self.stage,
                    requested: extra,
                    occupancy: self.current[0],
                    limit,
                }));
            }
        }
        Ok(())
    }

    fn close_compute(&mut self) {
        if let Some((step, id)) = self.open_compute.take() {
            let now = self.now_ns();
            self.timeline.push(TimelineEvent {
                kind: TimelineKind::ComputeEnd,
                step,
                bytes: 0,
                clock_ns: now,
                id,
            });
        }
    }
}
