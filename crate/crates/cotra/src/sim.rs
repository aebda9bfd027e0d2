//! Virtual-time model of an M-machine RDMA cluster: one-sided reads against
//! registered memory regions, credit-managed write rings per directed link,
//! small-message batching, and a deterministic event loop.
//!
//! Time is u64 nanoseconds. All scheduling ties break on a global sequence
//! number, so identical call sequences produce identical event traces.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::vector::Neighbor;

pub type VTime = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Deterministic,
    Concurrent,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub m: u32,
    pub one_sided_latency_us: f64,
    pub local_access_latency_us: f64,
    pub bandwidth_gbps: f64,
    pub max_inflight_per_link: usize,
    pub batch_flush_bytes: usize,
    pub batch_flush_interval_us: f64,
    pub ring_capacity: usize,
    pub mode: Mode,
    pub rng_seed: u64,
    /// Scan the whole network for leftover query traffic when termination is
    /// declared (deterministic mode safety check).
    pub verify_quiescence: bool,
}

impl SimConfig {
    pub fn new(m: u32) -> Self {
        SimConfig {
            m,
            one_sided_latency_us: 2.5,
            local_access_latency_us: 0.2,
            bandwidth_gbps: 56.0,
            max_inflight_per_link: 16,
            batch_flush_bytes: 1024,
            batch_flush_interval_us: 5.0,
            ring_capacity: 64,
            mode: Mode::Deterministic,
            rng_seed: 0,
            verify_quiescence: true,
        }
    }

    /// Zero latencies are allowed so tests can collapse virtual time; the CLI
    /// rejects them for real experiments.
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("need at least one machine"));
        }
        if self.one_sided_latency_us < 0.0
            || self.local_access_latency_us < 0.0
            || self.batch_flush_interval_us < 0.0
        {
            return Err(Error::invalid("latencies must be non-negative"));
        }
        if self.one_sided_latency_us < self.local_access_latency_us {
            return Err(Error::invalid("one-sided latency below local access latency"));
        }
        if self.bandwidth_gbps <= 0.0 {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        if self.max_inflight_per_link == 0 {
            return Err(Error::invalid("max_inflight_per_link must be >= 1"));
        }
        if self.batch_flush_bytes == 0 {
            return Err(Error::invalid("batch_flush_bytes must be >= 1"));
        }
        if self.ring_capacity < 2 {
            return Err(Error::invalid("ring_capacity must be >= 2"));
        }
        Ok(())
    }

    /// End-to-end latency of one one-sided op carrying `len` bytes.
    pub fn latency_ns(&self, len: u32) -> VTime {
        (self.one_sided_latency_us * 1000.0 + len as f64 * 8.0 / self.bandwidth_gbps).round()
            as VTime
    }

    pub fn local_access_ns(&self, accesses: u64) -> VTime {
        (self.local_access_latency_us * 1000.0 * accesses as f64).round() as VTime
    }

    pub fn flush_interval_ns(&self) -> VTime {
        (self.batch_flush_interval_us * 1000.0).round() as VTime
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum MsgKind {
    OneSidedRead,
    OneSidedReadReply,
    OneSidedWrite,
    TaskPush,
    TaskResult,
    SyncState,
    SeedDispatch,
    Token,
    QueryResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenColor {
    White,
    Black,
}

/// Work shipped to the machine owning the referenced vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskWork {
    /// A remote-neighbor-array block on the executing machine: resolve
    /// `count` ids starting at byte `ptr` of its array region.
    Block { ptr: u64, count: u32 },
    Ids(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPushMsg {
    pub query: u64,
    pub requester: u32,
    /// Expansion tag: results are matched back to the requesting expansion.
    pub tag: u64,
    pub work: TaskWork,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResultMsg {
    pub query: u64,
    pub tag: u64,
    pub results: Vec<Neighbor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncCandidate {
    pub id: u64,
    pub distance: f32,
    pub visited: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncMsg {
    pub query: u64,
    pub sender: u32,
    pub new_candidates: Vec<SyncCandidate>,
    pub bound: f32,
    /// Ids owned by the receiver whose distances the sender wants folded
    /// into the receiver's own queue.
    pub compute_requests: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedMsg {
    pub query: u64,
    pub origin: u32,
    pub k: u32,
    pub l: u32,
    pub query_vec: Vec<f32>,
    /// Seed candidates resident on the destination (empty for secondaries).
    pub seeds: Vec<Neighbor>,
    /// Primary machines in token-ring order; empty ring entry means the
    /// destination is a secondary (vector cache + task service only).
    pub ring: Vec<u32>,
    pub merge_target: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenMsg {
    pub query: u64,
    pub color: TokenColor,
    pub pass_count: u32,
    /// Outstanding-sync deficit accumulated around the ring.
    pub deficit: i64,
    pub initiator: u32,
    pub terminate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResultMsg {
    pub query: u64,
    pub sender: u32,
    pub results: Vec<Neighbor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadReplyMsg {
    pub handle: u64,
    pub query: u64,
    pub tag: u64,
    pub bytes: Vec<u8>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    ReadReply(ReadReplyMsg),
    CreditReturn { count: u32 },
    Task(TaskPushMsg),
    TaskRes(TaskResultMsg),
    Sync(SyncMsg),
    Seed(SeedMsg),
    Token(TokenMsg),
    Result(QueryResultMsg),
}

impl Payload {
    pub fn kind(&self) -> MsgKind {
        match self {
            Payload::ReadReply(_) => MsgKind::OneSidedReadReply,
            Payload::CreditReturn { .. } => MsgKind::OneSidedWrite,
            Payload::Task(_) => MsgKind::TaskPush,
            Payload::TaskRes(_) => MsgKind::TaskResult,
            Payload::Sync(_) => MsgKind::SyncState,
            Payload::Seed(_) => MsgKind::SeedDispatch,
            Payload::Token(_) => MsgKind::Token,
            Payload::Result(_) => MsgKind::QueryResult,
        }
    }

    /// Modeled wire size. Task results are 12 bytes per (id, distance) pair;
    /// other records count their logical fields.
    pub fn wire_bytes(&self) -> u32 {
        match self {
            Payload::ReadReply(r) => r.bytes.len() as u32,
            Payload::CreditReturn { .. } => 8,
            Payload::Task(t) => match &t.work {
                TaskWork::Block { .. } => 32,
                TaskWork::Ids(ids) => 16 + 8 * ids.len() as u32,
            },
            Payload::TaskRes(r) => 12 * r.results.len() as u32,
            Payload::Sync(s) => {
                12 + 13 * s.new_candidates.len() as u32 + 8 * s.compute_requests.len() as u32
            }
            Payload::Seed(s) => {
                16 + 4 * s.query_vec.len() as u32
                    + 12 * s.seeds.len() as u32
                    + 4 * s.ring.len() as u32
            }
            Payload::Token(_) => 24,
            Payload::Result(r) => 8 + 12 * r.results.len() as u32,
        }
    }

    pub fn query(&self) -> Option<u64> {
        match self {
            Payload::ReadReply(r) => Some(r.query),
            Payload::CreditReturn { .. } => None,
            Payload::Task(t) => Some(t.query),
            Payload::TaskRes(r) => Some(r.query),
            Payload::Sync(s) => Some(s.query),
            Payload::Seed(s) => Some(s.query),
            Payload::Token(t) => Some(t.query),
            Payload::Result(r) => Some(r.query),
        }
    }
}

/// One wire message: one one-sided op carrying one or more same-kind items.
#[derive(Debug, Clone)]
pub struct Message {
    pub seq: u64,
    pub src: u32,
    pub dst: u32,
    pub kind: MsgKind,
    pub items: Vec<Payload>,
    pub size_bytes: u32,
    pub send_time: VTime,
    pub deliver_time: VTime,
}

fn kind_uses_ring(kind: MsgKind) -> bool {
    !matches!(
        kind,
        MsgKind::OneSidedRead | MsgKind::OneSidedReadReply | MsgKind::OneSidedWrite
    )
}

fn kind_batched(kind: MsgKind) -> bool {
    matches!(kind, MsgKind::TaskPush | MsgKind::TaskResult)
}

/// Credit state of one directed link's circular write queue. Slots hold
/// delivered-but-unconsumed message sequence numbers; every message that is
/// in flight, parked in a slot, or owed as a credit return accounts for one
/// missing credit.
#[derive(Debug)]
pub struct WriteRing {
    pub capacity: usize,
    pub credits: usize,
    inflight: usize,
    slots: VecDeque<u64>,
    pending_return: u32,
    returns_in_flight: u32,
    deferred: VecDeque<(VTime, MsgKind, Vec<Payload>)>,
}

impl WriteRing {
    fn new(capacity: usize) -> Self {
        WriteRing {
            capacity,
            credits: capacity,
            inflight: 0,
            slots: VecDeque::new(),
            pending_return: 0,
            returns_in_flight: 0,
            deferred: VecDeque::new(),
        }
    }

    pub fn unconsumed(&self) -> usize {
        self.slots.len()
    }

    pub fn deferred_len(&self) -> usize {
        self.deferred.len()
    }

    /// Every slot is exactly one of: free (credit here or being returned),
    /// claimed by an in-flight message, or holding an unconsumed message.
    pub fn check_conservation(&self) -> Result<()> {
        let total = self.credits
            + self.inflight
            + self.slots.len()
            + self.pending_return as usize
            + self.returns_in_flight as usize;
        if total != self.capacity {
            return Err(Error::Protocol(format!(
                "ring accounts for {total} slots, capacity {}",
                self.capacity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct BatchPending {
    items: Vec<Payload>,
    bytes: usize,
}

struct LinkState {
    /// Completion times of the op occupying each inflight slot.
    slot_free: Vec<VTime>,
    fifo_write: VTime,
    fifo_reply: VTime,
    ring: WriteRing,
    batch: BTreeMap<MsgKind, BatchPending>,
    deadline_armed: bool,
}

impl LinkState {
    fn new(cfg: &SimConfig) -> Self {
        LinkState {
            slot_free: vec![0; cfg.max_inflight_per_link],
            fifo_write: 0,
            fifo_reply: 0,
            ring: WriteRing::new(cfg.ring_capacity),
            batch: BTreeMap::new(),
            deadline_armed: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LinkStats {
    pub msgs: u64,
    pub bytes: u64,
    pub ops: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MachineStats {
    pub computations: u64,
    pub tasks_served: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct QueryNetStats {
    pub bytes: u64,
    pub bytes_by_kind: BTreeMap<MsgKind, u64>,
    pub msgs_by_kind: BTreeMap<MsgKind, u64>,
    pub read_ops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NetStats {
    pub virtual_time_ns: VTime,
    pub per_machine: Vec<MachineStats>,
    pub per_link: BTreeMap<(u32, u32), LinkStats>,
    pub bytes_by_kind: BTreeMap<MsgKind, u64>,
    pub sent_bytes: u64,
    pub delivered_bytes: u64,
    pub sent_msgs: u64,
    pub delivered_msgs: u64,
    pub per_query: BTreeMap<u64, QueryNetStats>,
    /// SeedDispatch deliveries per (query, machine); the query vector must
    /// cross each wire at most once.
    pub seed_sends: BTreeMap<(u64, u32), u32>,
}

impl NetStats {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "virtual_time_us": self.virtual_time_ns as f64 / 1000.0,
            "per_machine": self.per_machine,
            "per_link": self
                .per_link
                .iter()
                .map(|((src, dst), s)| {
                    serde_json::json!({
                        "src": src, "dst": dst,
                        "msgs": s.msgs, "bytes": s.bytes, "ops": s.ops,
                    })
                })
                .collect::<Vec<_>>(),
            "bytes_by_kind": self
                .bytes_by_kind
                .iter()
                .map(|(k, v)| (format!("{k:?}"), *v))
                .collect::<BTreeMap<String, u64>>(),
            "sent_bytes": self.sent_bytes,
            "delivered_bytes": self.delivered_bytes,
        })
    }
}

enum Event {
    Deliver(Message),
    Flush { src: u32, dst: u32 },
}

struct Scheduled {
    time: VTime,
    seq: u64,
    ev: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time.cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

/// The simulated fabric: event heap, per-link state, registered regions, and
/// per-machine inboxes.
pub struct Net {
    pub cfg: SimConfig,
    now: VTime,
    seq: u64,
    events: BinaryHeap<Reverse<Scheduled>>,
    links: BTreeMap<(u32, u32), LinkState>,
    regions: HashMap<(u32, u32), Arc<Vec<u8>>>,
    inboxes: Vec<VecDeque<Message>>,
    stats: NetStats,
}

impl Net {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.m as usize;
        Ok(Net {
            cfg,
            now: 0,
            seq: 0,
            events: BinaryHeap::new(),
            links: BTreeMap::new(),
            regions: HashMap::new(),
            inboxes: vec![VecDeque::new(); m],
            stats: NetStats { per_machine: vec![MachineStats::default(); m], ..Default::default() },
        })
    }

    pub fn now(&self) -> VTime {
        self.now
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut NetStats {
        &mut self.stats
    }

    /// Fold a bulk transfer into the traffic counters without scheduling
    /// events. Build-phase exchanges are counted, not latency-modeled.
    pub fn account_bulk(&mut self, src: u32, dst: u32, kind: MsgKind, bytes: u64) {
        assert_ne!(src, dst, "bulk transfers are cross-machine");
        let ls = self.stats.per_link.entry((src, dst)).or_default();
        ls.msgs += 1;
        ls.bytes += bytes;
        ls.ops += 1;
        *self.stats.bytes_by_kind.entry(kind).or_default() += bytes;
        self.stats.sent_bytes += bytes;
        self.stats.sent_msgs += 1;
        self.stats.delivered_bytes += bytes;
        self.stats.delivered_msgs += 1;
    }

    pub fn register_region(&mut self, machine: u32, region: u32, data: Arc<Vec<u8>>) {
        self.regions.insert((machine, region), data);
    }

    pub fn region(&self, machine: u32, region: u32) -> Option<&Arc<Vec<u8>>> {
        self.regions.get(&(machine, region))
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn link(&mut self, src: u32, dst: u32) -> &mut LinkState {
        let cfg_ref = &self.cfg;
        self.links.entry((src, dst)).or_insert_with(|| LinkState::new(cfg_ref))
    }

    pub fn ring(&self, src: u32, dst: u32) -> Option<&WriteRing> {
        self.links.get(&(src, dst)).map(|l| &l.ring)
    }

    /// One-sided read of `len` bytes at `offset` in (dst, region). The reply
    /// (or an error completion) is delivered to src's inbox after the modeled
    /// latency; dst's CPU is never involved.
    pub fn post_read(
        &mut self,
        at: VTime,
        src: u32,
        dst: u32,
        region: u32,
        offset: u64,
        len: u32,
        query: u64,
        tag: u64,
    ) -> u64 {
        assert_ne!(src, dst, "local data is accessed directly, not via read");
        let at = at.max(self.now);
        let handle = self.next_seq();
        let reply = match self.regions.get(&(dst, region)) {
            None => ReadReplyMsg {
                handle,
                query,
                tag,
                bytes: Vec::new(),
                error: Some(format!("region {region} not registered on machine {dst}")),
            },
            Some(data) => {
                let end = offset.saturating_add(len as u64);
                if end > data.len() as u64 {
                    ReadReplyMsg {
                        handle,
                        query,
                        tag,
                        bytes: Vec::new(),
                        error: Some(format!(
                            "read [{offset}, {end}) outside region of {} bytes",
                            data.len()
                        )),
                    }
                } else {
                    ReadReplyMsg {
                        handle,
                        query,
                        tag,
                        bytes: data[offset as usize..end as usize].to_vec(),
                        error: None,
                    }
                }
            }
        };
        self.stats.per_query.entry(query).or_default().read_ops += 1;
        self.transmit(at, (src, dst), src, Payload::ReadReply(reply).into_vec(), true);
        handle
    }

    /// Route an engine message. Task pushes and task results are batched;
    /// everything else is one wire message through the destination ring.
    pub fn send(&mut self, at: VTime, src: u32, dst: u32, payload: Payload) {
        assert_ne!(src, dst, "messages are cross-machine only");
        let at = at.max(self.now);
        let kind = payload.kind();
        assert!(kind_uses_ring(kind), "reads and credits use dedicated paths");
        if kind_batched(kind) {
            self.batch_add(at, src, dst, payload);
        } else {
            self.transmit_ring(at, src, dst, kind, vec![payload]);
        }
    }

    fn batch_add(&mut self, at: VTime, src: u32, dst: u32, payload: Payload) {
        let kind = payload.kind();
        let threshold = self.cfg.batch_flush_bytes;
        let interval = self.cfg.flush_interval_ns();
        let link = self.link(src, dst);
        let pend = link.batch.entry(kind).or_default();
        pend.bytes += payload.wire_bytes() as usize;
        pend.items.push(payload);
        if pend.bytes >= threshold {
            let items = std::mem::take(&mut link.batch.get_mut(&kind).unwrap().items);
            link.batch.remove(&kind);
            self.transmit_ring(at, src, dst, kind, items);
        } else if !link.deadline_armed {
            link.deadline_armed = true;
            let seq = self.next_seq();
            self.events.push(Reverse(Scheduled {
                time: at + interval,
                seq,
                ev: Event::Flush { src, dst },
            }));
        }
    }

    fn flush_link(&mut self, at: VTime, src: u32, dst: u32) {
        let link = self.link(src, dst);
        link.deadline_armed = false;
        let pending: Vec<(MsgKind, Vec<Payload>)> = std::mem::take(&mut link.batch)
            .into_iter()
            .map(|(k, p)| (k, p.items))
            .collect();
        for (kind, items) in pending {
            if !items.is_empty() {
                self.transmit_ring(at, src, dst, kind, items);
            }
        }
    }

    fn transmit_ring(&mut self, at: VTime, src: u32, dst: u32, kind: MsgKind, items: Vec<Payload>) {
        let link = self.link(src, dst);
        if link.ring.credits == 0 || !link.ring.deferred.is_empty() {
            link.ring.deferred.push_back((at, kind, items));
            return;
        }
        link.ring.credits -= 1;
        link.ring.inflight += 1;
        debug_assert!(items.iter().all(|p| p.kind() == kind));
        self.transmit(at, (src, dst), dst, items, false);
    }

    /// Put one wire message on the link: claim an inflight slot, apply the
    /// latency model, keep per-direction delivery FIFO, record stats.
    fn transmit(
        &mut self,
        at: VTime,
        link_key: (u32, u32),
        inbox: u32,
        items: Vec<Payload>,
        reply_direction: bool,
    ) {
        let size: u32 = items.iter().map(|p| p.wire_bytes()).sum();
        let kind = items[0].kind();
        debug_assert!(items.iter().all(|p| p.kind() == kind));
        let latency = self.cfg.latency_ns(size);
        let seq = self.next_seq();

        let link = self.link(link_key.0, link_key.1);
        let slot = (0..link.slot_free.len())
            .min_by_key(|&i| link.slot_free[i])
            .expect("links have at least one slot");
        let start = at.max(link.slot_free[slot]);
        let mut deliver = start + latency;
        let fifo = if reply_direction { &mut link.fifo_reply } else { &mut link.fifo_write };
        deliver = deliver.max(*fifo);
        *fifo = deliver;
        link.slot_free[slot] = deliver;

        let ls = self.stats.per_link.entry(link_key).or_default();
        ls.msgs += 1;
        ls.bytes += size as u64;
        ls.ops += 1;
        *self.stats.bytes_by_kind.entry(kind).or_default() += size as u64;
        self.stats.sent_bytes += size as u64;
        self.stats.sent_msgs += 1;
        for p in &items {
            if let Some(q) = p.query() {
                let qs = self.stats.per_query.entry(q).or_default();
                qs.bytes += p.wire_bytes() as u64;
                *qs.bytes_by_kind.entry(kind).or_default() += p.wire_bytes() as u64;
                *qs.msgs_by_kind.entry(kind).or_default() += 1;
            }
        }
        if kind == MsgKind::SeedDispatch {
            for p in &items {
                if let Payload::Seed(s) = p {
                    *self.stats.seed_sends.entry((s.query, inbox)).or_default() += 1;
                }
            }
        }

        let msg = Message {
            seq,
            src: if reply_direction { link_key.1 } else { link_key.0 },
            dst: inbox,
            kind,
            items,
            size_bytes: size,
            send_time: at,
            deliver_time: deliver,
        };
        debug_assert!(msg.deliver_time >= msg.send_time + latency);
        self.events.push(Reverse(Scheduled { time: deliver, seq, ev: Event::Deliver(msg) }));
    }

    /// Acknowledge a ring-delivered message after the receiver has processed
    /// it; frees the slot and returns credits in batches of capacity/2.
    pub fn consume_ring(&mut self, at: VTime, msg: &Message) {
        if !kind_uses_ring(msg.kind) {
            return;
        }
        let key = (msg.src, msg.dst);
        let half = {
            let link = self.link(key.0, key.1);
            let front = link.ring.slots.pop_front();
            assert_eq!(front, Some(msg.seq), "ring consumed out of FIFO order");
            link.ring.pending_return += 1;
            let half = (link.ring.capacity / 2).max(1) as u32;
            if link.ring.pending_return >= half {
                let n = link.ring.pending_return;
                link.ring.pending_return = 0;
                link.ring.returns_in_flight += n;
                Some(n)
            } else {
                None
            }
        };
        if let Some(n) = half {
            // Credit notification travels dst -> src but manages the
            // (src, dst) ring; it never competes for that ring's credits.
            self.transmit(
                at,
                (msg.dst, msg.src),
                msg.src,
                vec![Payload::CreditReturn { count: n }],
                false,
            );
        }
    }

    fn deliver(&mut self, msg: Message) {
        self.stats.delivered_bytes += msg.size_bytes as u64;
        self.stats.delivered_msgs += 1;
        if msg.kind == MsgKind::OneSidedWrite {
            if let Some(Payload::CreditReturn { count }) = msg.items.first() {
                let count = *count;
                let at = msg.deliver_time;
                // The return travelled dst -> src of the ring it manages.
                let key = (msg.dst, msg.src);
                let link = self.link(key.0, key.1);
                link.ring.returns_in_flight -= count;
                link.ring.credits += count as usize;
                self.drain_deferred(at, key.0, key.1);
                return;
            }
        }
        if kind_uses_ring(msg.kind) {
            let key = (msg.src, msg.dst);
            let link = self.link(key.0, key.1);
            link.ring.inflight -= 1;
            link.ring.slots.push_back(msg.seq);
        }
        self.inboxes[msg.dst as usize].push_back(msg);
    }

    fn drain_deferred(&mut self, at: VTime, src: u32, dst: u32) {
        loop {
            let link = self.link(src, dst);
            if link.ring.credits == 0 || link.ring.deferred.is_empty() {
                break;
            }
            let (queued_at, kind, items) = link.ring.deferred.pop_front().unwrap();
            link.ring.credits -= 1;
            link.ring.inflight += 1;
            let _ = kind;
            self.transmit(at.max(queued_at), (src, dst), dst, items, false);
        }
    }

    pub fn next_event_time(&self) -> Option<VTime> {
        self.events.peek().map(|Reverse(s)| s.time)
    }

    /// Advance to the next event time and deliver everything due then.
    /// Returns false when no events remain.
    pub fn advance(&mut self) -> bool {
        let Some(t) = self.next_event_time() else {
            return false;
        };
        debug_assert!(t >= self.now);
        self.now = t;
        self.stats.virtual_time_ns = t;
        while self.events.peek().is_some_and(|Reverse(s)| s.time == t) {
            let Reverse(s) = self.events.pop().unwrap();
            match s.ev {
                Event::Deliver(msg) => self.deliver(msg),
                Event::Flush { src, dst } => self.flush_link(t, src, dst),
            }
        }
        true
    }

    pub fn take_inbox(&mut self, machine: u32) -> Vec<Message> {
        self.inboxes[machine as usize].drain(..).collect()
    }

    pub fn inbox_len(&self, machine: u32) -> usize {
        self.inboxes[machine as usize].len()
    }

    /// True when no event, batched item, or deferred ring message remains.
    /// Inboxes are the caller's to drain.
    pub fn idle(&self) -> bool {
        self.events.is_empty()
            && self.links.values().all(|l| {
                l.ring.deferred.is_empty() && l.batch.values().all(|b| b.items.is_empty())
            })
    }

    /// Any trace of the query still in the fabric: scheduled deliveries,
    /// batched items, deferred ring messages, or undrained inbox entries.
    /// Returns the kind of the first offender. Seed broadcasts with an empty
    /// ring are exempt: they only cache the query vector on machines outside
    /// the ring and may legitimately land after the ring has gone quiet.
    pub fn query_in_flight(&self, query: u64) -> Option<MsgKind> {
        let relevant = |p: &Payload| match p {
            Payload::Seed(s) => !s.ring.is_empty(),
            _ => true,
        };
        let item_match = |items: &[Payload]| {
            items.iter().find(|p| p.query() == Some(query) && relevant(p)).map(|p| p.kind())
        };
        for Reverse(s) in self.events.iter() {
            if let Event::Deliver(m) = &s.ev {
                if let Some(k) = item_match(&m.items) {
                    return Some(k);
                }
            }
        }
        for l in self.links.values() {
            if let Some(k) =
                l.ring.deferred.iter().find_map(|(_, _, items)| item_match(items))
            {
                return Some(k);
            }
            if let Some(k) = l.batch.values().find_map(|b| item_match(&b.items)) {
                return Some(k);
            }
        }
        self.inboxes.iter().find_map(|ib| ib.iter().find_map(|m| item_match(&m.items)))
    }

    pub fn check_ring_conservation(&self) -> Result<()> {
        for ((src, dst), l) in &self.links {
            l.ring.check_conservation().map_err(|e| {
                Error::Protocol(format!("ring {src}->{dst}: {e}"))
            })?;
        }
        Ok(())
    }
}

impl Payload {
    fn into_vec(self) -> Vec<Payload> {
        vec![self]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg(m: u32) -> SimConfig {
        SimConfig::new(m)
    }

    fn drain_all(net: &mut Net) -> Vec<Message> {
        let mut out = Vec::new();
        while net.advance() {
            for m in 0..net.cfg.m {
                for msg in net.take_inbox(m) {
                    net.consume_ring(net.now(), &msg);
                    out.push(msg);
                }
            }
        }
        out
    }

    #[test]
    fn read_latency_and_content() {
        let mut net = Net::new(small_cfg(2)).unwrap();
        let data: Vec<u8> = (0..128u32).map(|i| i as u8).collect();
        net.register_region(1, 0, Arc::new(data.clone()));
        net.post_read(0, 0, 1, 0, 0, 128, 7, 0);
        assert!(net.advance());
        // 2.5 us base plus 128 B / 56 Gbps.
        assert_eq!(net.now(), 2500 + (128.0 * 8.0 / 56.0_f64).round() as u64);
        let msgs = net.take_inbox(0);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].kind, MsgKind::OneSidedReadReply);
        match &msgs[0].items[0] {
            Payload::ReadReply(r) => {
                assert!(r.error.is_none());
                assert_eq!(r.bytes, data);
                assert_eq!(r.query, 7);
            }
            other => panic!("unexpected payload {other:?}"),
        }
    }

    #[test]
    fn read_faults_are_error_completions() {
        let mut net = Net::new(small_cfg(2)).unwrap();
        net.register_region(1, 0, Arc::new(vec![0u8; 64]));
        net.post_read(0, 0, 1, 0, 60, 16, 1, 0);
        net.post_read(0, 0, 1, 9, 0, 8, 1, 0);
        let msgs = drain_all(&mut net);
        assert_eq!(msgs.len(), 2);
        for m in &msgs {
            match &m.items[0] {
                Payload::ReadReply(r) => {
                    assert!(r.error.is_some());
                    assert!(r.bytes.is_empty());
                }
                other => panic!("unexpected payload {other:?}"),
            }
        }
    }

    #[test]
    fn inflight_limit_serializes_reads() {
        let mut cfg = small_cfg(2);
        cfg.max_inflight_per_link = 2;
        let mut net = Net::new(cfg).unwrap();
        net.register_region(1, 0, Arc::new(vec![0u8; 1024]));
        for _ in 0..3 {
            net.post_read(0, 0, 1, 0, 0, 64, 1, 0);
        }
        let msgs = drain_all(&mut net);
        assert_eq!(msgs.len(), 3);
        let lat = Net::new(small_cfg(2)).unwrap().cfg.latency_ns(64);
        assert_eq!(msgs[0].deliver_time, lat);
        assert_eq!(msgs[1].deliver_time, lat);
        // Third waits for a free slot.
        assert_eq!(msgs[2].deliver_time, 2 * lat);
        assert!(msgs.windows(2).all(|w| w[0].deliver_time <= w[1].deliver_time));
    }

    fn token(query: u64) -> Payload {
        Payload::Token(TokenMsg {
            query,
            color: TokenColor::White,
            pass_count: 0,
            deficit: 0,
            initiator: 0,
            terminate: false,
        })
    }

    #[test]
    fn ring_backpressure_and_credit_batch() {
        let mut cfg = small_cfg(2);
        cfg.ring_capacity = 4;
        let mut net = Net::new(cfg).unwrap();
        for i in 0..5 {
            net.send(0, 0, 1, token(i));
        }
        {
            let ring = net.ring(0, 1).unwrap();
            assert_eq!(ring.credits, 0);
            assert_eq!(ring.deferred_len(), 1, "fifth message waits for credits");
        }
        // Deliver the four in-flight messages, then consume two: one credit
        // return of 2 unblocks the deferred message.
        while net.ring(0, 1).unwrap().unconsumed() < 4 {
            assert!(net.advance());
        }
        let msgs = net.take_inbox(1);
        assert_eq!(msgs.len(), 4);
        net.consume_ring(net.now(), &msgs[0]);
        assert_eq!(net.ring(0, 1).unwrap().deferred_len(), 1, "one consume is below the batch");
        net.consume_ring(net.now(), &msgs[1]);
        net.consume_ring(net.now(), &msgs[2]);
        net.consume_ring(net.now(), &msgs[3]);
        net.check_ring_conservation().unwrap();
        let rest = drain_all(&mut net);
        assert_eq!(rest.len(), 1, "parked message flows after the credit batch");
        net.check_ring_conservation().unwrap();
    }

    #[test]
    fn ring_fifo_order() {
        let mut net = Net::new(small_cfg(2)).unwrap();
        for i in 0..10 {
            net.send(i * 3, 0, 1, token(i));
        }
        let msgs = drain_all(&mut net);
        let ids: Vec<u64> = msgs
            .iter()
            .map(|m| match &m.items[0] {
                Payload::Token(t) => t.query,
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    fn task_result(query: u64, id: u64) -> Payload {
        Payload::TaskRes(TaskResultMsg {
            query,
            tag: 0,
            results: vec![Neighbor::new(id, 1.0)],
        })
    }

    #[test]
    fn flush_on_interval_coalesces() {
        let mut net = Net::new(small_cfg(2)).unwrap();
        for i in 0..10 {
            net.send(0, 0, 1, task_result(1, i));
        }
        assert_eq!(net.stats().sent_msgs, 0, "below threshold, nothing sent yet");
        let msgs = drain_all(&mut net);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].size_bytes, 120);
        assert_eq!(msgs[0].items.len(), 10);
        assert_eq!(net.stats().per_link[&(0, 1)].ops, 1);
    }

    #[test]
    fn flush_on_threshold_mid_stream() {
        let mut net = Net::new(small_cfg(2)).unwrap();
        for i in 0..100 {
            net.send(0, 0, 1, task_result(1, i));
        }
        // 86 x 12 = 1032 >= 1024 triggers the inline flush; the tail rides
        // the interval deadline.
        let msgs = drain_all(&mut net);
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].items.len(), 86);
        assert_eq!(msgs[0].size_bytes, 1032);
        assert_eq!(msgs[1].items.len(), 14);
        assert_eq!(msgs[1].size_bytes, 168);
    }

    #[test]
    fn empty_net_is_idle() {
        let mut net = Net::new(small_cfg(3)).unwrap();
        assert!(net.idle());
        assert!(!net.advance());
        assert_eq!(net.now(), 0);
    }

    #[test]
    fn conservation_and_determinism() {
        let run = || {
            let mut net = Net::new(small_cfg(3)).unwrap();
            net.register_region(2, 0, Arc::new(vec![7u8; 512]));
            for i in 0..20 {
                net.send(i, 0, 1, task_result(1, i));
                net.send(i, 1, 2, token(i));
                if i % 3 == 0 {
                    net.post_read(i, 0, 2, 0, (i % 4) * 100, 100, 1, i);
                }
            }
            let msgs = drain_all(&mut net);
            (serde_json::to_string(&net.stats().to_json()).unwrap(), msgs.len(), {
                let s = net.stats();
                (s.sent_bytes, s.delivered_bytes, s.sent_msgs, s.delivered_msgs)
            })
        };
        let (a, n_a, (sb, db, sm, dm)) = run();
        let (b, n_b, _) = run();
        assert_eq!(a, b, "identical workloads must serialize identically");
        assert_eq!(n_a, n_b);
        assert_eq!(sb, db, "every sent byte is delivered");
        assert_eq!(sm, dm);
    }

    #[test]
    fn query_in_flight_tracks_all_stages() {
        let mut net = Net::new(small_cfg(2)).unwrap();
        assert!(net.query_in_flight(9).is_none());
        net.send(0, 0, 1, task_result(9, 1));
        assert!(net.query_in_flight(9).is_some(), "batched item counts as in flight");
        while net.advance() {}
        assert!(net.query_in_flight(9).is_some(), "undrained inbox counts as in flight");
        for m in net.take_inbox(1) {
            net.consume_ring(net.now(), &m);
        }
        while net.advance() {}
        assert!(net.query_in_flight(9).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn ring_never_loses_or_reorders(ops in proptest::collection::vec(0u8..4, 200..400)) {
            let mut cfg = small_cfg(2);
            cfg.ring_capacity = 8;
            let mut net = Net::new(cfg).unwrap();
            let mut sent = 0u64;
            let mut consumed: Vec<u64> = Vec::new();
            let mut t = 0;
            for op in ops {
                t += 50;
                match op {
                    // Bias toward sends so backpressure is exercised.
                    0 | 1 => {
                        net.send(t, 0, 1, token(sent));
                        sent += 1;
                    }
                    2 => { net.advance(); }
                    _ => {
                        for m in net.take_inbox(1) {
                            net.consume_ring(net.now(), &m);
                            if let Payload::Token(tok) = &m.items[0] {
                                consumed.push(tok.query);
                            }
                        }
                    }
                }
                let ring = net.ring(0, 1);
                if let Some(r) = ring {
                    prop_assert!(r.unconsumed() <= 8);
                    r.check_conservation().unwrap();
                }
            }
            loop {
                let mut progressed = false;
                for m in net.take_inbox(1) {
                    progressed = true;
                    net.consume_ring(net.now(), &m);
                    if let Payload::Token(tok) = &m.items[0] {
                        consumed.push(tok.query);
                    }
                }
                progressed |= net.advance();
                if !progressed {
                    break;
                }
            }
            prop_assert_eq!(consumed.len() as u64, sent, "no message lost");
            let expect: Vec<u64> = (0..sent).collect();
            prop_assert_eq!(consumed, expect, "FIFO preserved");
            net.check_ring_conservation().unwrap();
        }
    }
}
