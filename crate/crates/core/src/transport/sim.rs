//! Deterministic discrete-event network model.
//!
//! Every rank is a host with one uplink and one downlink of
//! `bandwidth_bps` each. Hosts are grouped into pods; a transfer between
//! pods additionally crosses the pods' uplink/downlink pair, so it pays two
//! latencies instead of one. Concurrent transfers share links max-min
//! fairly, which reduces to an equal split on a single shared link. A
//! transfer of `B` bytes over idle links is delivered exactly
//! `hops * latency_s + B / bandwidth_bps` seconds after it was sent.
//!
//! Rank programs are polled one at a time in rank order whenever they are
//! woken; the clock only moves when no rank can make progress, so a run is
//! a pure function of its inputs.

use std::cell::RefCell;
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Waker};

use bytes::Bytes;
use futures::future::poll_fn;
use futures::task::{waker, ArcWake};
use serde::{Deserialize, Serialize};

use super::mailbox::Mailbox;
use super::{Endpoint, Inner, RunReport, Tag, TransportConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Per link-pair latency in seconds.
    pub latency_s: f64,
    /// Per-direction link bandwidth in bytes per second.
    pub bandwidth_bps: f64,
    pub pods: usize,
}

impl Default for SimParams {
    /// 1.5 µs and 100 Gbit/s per direction on a single pod.
    fn default() -> Self {
        Self {
            latency_s: 1.5e-6,
            bandwidth_bps: 12.5e9,
            pods: 1,
        }
    }
}

impl SimParams {
    fn validate(&self) -> Result<()> {
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite())
            || !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite())
            || self.pods == 0
        {
            return Err(Error::InvalidConfig(format!("bad simulator parameters {self:?}")));
        }
        Ok(())
    }
}

enum Arrival {
    Data {
        src: usize,
        dst: usize,
        tag: Tag,
        seq: u64,
        bytes: Bytes,
    },
    PullRequest {
        requester: usize,
        src: usize,
        tag: Tag,
    },
    PullReply {
        requester: usize,
        src: usize,
        tag: Tag,
        seq: u64,
        bytes: Bytes,
    },
}

enum EventKind {
    FlowCheck { generation: u64 },
    Arrive(Arrival),
    Timer { rank: usize, id: u64 },
}

struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

struct Flow {
    links: [usize; 4],
    n_links: usize,
    remaining: f64,
    rate: f64,
    finish_at: f64,
    hops: u32,
    arrival: Arrival,
}

impl Flow {
    fn links(&self) -> &[usize] {
        &self.links[..self.n_links]
    }
}

/// Active transfers and their max-min fair rates.
struct FlowNet {
    caps: Vec<f64>,
    flows: BTreeMap<u64, Flow>,
    next_id: u64,
    last_update: f64,
    generation: u64,
    dirty: bool,
    // scratch space reused across recomputations
    cap: Vec<f64>,
    count: Vec<u32>,
    bottleneck: Vec<bool>,
}

impl FlowNet {
    fn new(caps: Vec<f64>) -> Self {
        let l = caps.len();
        Self {
            caps,
            flows: BTreeMap::new(),
            next_id: 0,
            last_update: 0.0,
            generation: 0,
            dirty: false,
            cap: vec![0.0; l],
            count: vec![0; l],
            bottleneck: vec![false; l],
        }
    }

    fn advance(&mut self, now: f64) {
        let dt = now - self.last_update;
        if dt > 0.0 {
            for f in self.flows.values_mut() {
                f.remaining -= f.rate * dt;
            }
        }
        self.last_update = now;
    }

    fn add(&mut self, now: f64, links: &[usize], bytes: usize, hops: u32, arrival: Arrival) {
        self.advance(now);
        let mut l = [0; 4];
        l[..links.len()].copy_from_slice(links);
        self.flows.insert(
            self.next_id,
            Flow {
                links: l,
                n_links: links.len(),
                remaining: bytes as f64,
                rate: 0.0,
                finish_at: f64::INFINITY,
                hops,
                arrival,
            },
        );
        self.next_id += 1;
        self.dirty = true;
    }

    /// Progressive filling: repeatedly saturate the links with the smallest
    /// fair share and freeze the flows crossing them. Returns the earliest
    /// completion time.
    fn recompute(&mut self) -> Option<f64> {
        self.dirty = false;
        self.generation += 1;
        if self.flows.is_empty() {
            return None;
        }
        self.cap.copy_from_slice(&self.caps);
        self.count.iter_mut().for_each(|c| *c = 0);
        for f in self.flows.values_mut() {
            f.rate = 0.0;
            for &l in &f.links[..f.n_links] {
                self.count[l] += 1;
            }
        }
        let mut left = self.flows.len();
        while left > 0 {
            let mut share = f64::INFINITY;
            for (c, &n) in self.cap.iter().zip(&self.count) {
                if n > 0 {
                    share = share.min(c / f64::from(n));
                }
            }
            let limit = share * (1.0 + 1e-12);
            for ((b, c), &n) in self.bottleneck.iter_mut().zip(&self.cap).zip(&self.count) {
                *b = n > 0 && c / f64::from(n) <= limit;
            }
            for f in self.flows.values_mut() {
                if f.rate > 0.0 || !f.links().iter().any(|&l| self.bottleneck[l]) {
                    continue;
                }
                f.rate = share;
                left -= 1;
                for &l in &f.links[..f.n_links] {
                    self.cap[l] -= share;
                    self.count[l] -= 1;
                }
            }
        }
        let now = self.last_update;
        let mut next = f64::INFINITY;
        for f in self.flows.values_mut() {
            f.finish_at = now + f.remaining.max(0.0) / f.rate;
            next = next.min(f.finish_at);
        }
        Some(next)
    }

    fn take_finished(&mut self, now: f64) -> Vec<Flow> {
        self.advance(now);
        let done: Vec<u64> = self
            .flows
            .iter()
            .filter(|(_, f)| f.finish_at <= now)
            .map(|(&id, _)| id)
            .collect();
        self.dirty = true;
        done.into_iter()
            .filter_map(|id| self.flows.remove(&id))
            .collect()
    }
}

type ChannelKey = (usize, usize, Tag);

/// Restores send order on one channel when a short message overtakes a long one.
#[derive(Default)]
struct Sequencer {
    issued: HashMap<ChannelKey, u64>,
    next: HashMap<ChannelKey, u64>,
    held: HashMap<ChannelKey, BTreeMap<u64, Bytes>>,
}

impl Sequencer {
    fn issue(&mut self, key: ChannelKey) -> u64 {
        let seq = self.issued.entry(key).or_default();
        *seq += 1;
        *seq - 1
    }

    /// Accepts message `seq` and returns every message now deliverable in order.
    fn accept(&mut self, key: ChannelKey, seq: u64, bytes: Bytes) -> Vec<Bytes> {
        let next = self.next.entry(key).or_default();
        if seq != *next {
            self.held.entry(key).or_default().insert(seq, bytes);
            return Vec::new();
        }
        let mut out = vec![bytes];
        *next += 1;
        if let Some(held) = self.held.get_mut(&key) {
            while let Some(b) = held.remove(next) {
                out.push(b);
                *next += 1;
            }
            if held.is_empty() {
                self.held.remove(&key);
            }
        }
        out
    }
}

pub(crate) struct SimCore {
    params: SimParams,
    cfg: Arc<TransportConfig>,
    hosts_per_pod: usize,
    n_hosts: usize,
    clock: f64,
    seq: u64,
    events: BinaryHeap<Reverse<Event>>,
    boxes: Vec<Mailbox>,
    inflight: HashMap<ChannelKey, usize>,
    data_order: Sequencer,
    reply_order: Sequencer,
    net: FlowNet,
    fired: HashSet<u64>,
    next_timer: u64,
    messages: u64,
}

impl SimCore {
    fn new(n: usize, params: SimParams, cfg: Arc<TransportConfig>) -> Self {
        let pods = params.pods.min(n);
        let hosts_per_pod = n.div_ceil(pods);
        let mut caps = vec![params.bandwidth_bps; 2 * n];
        caps.extend(std::iter::repeat_n(
            params.bandwidth_bps * hosts_per_pod as f64,
            2 * pods,
        ));
        Self {
            params,
            cfg,
            hosts_per_pod,
            n_hosts: n,
            clock: 0.0,
            seq: 0,
            events: BinaryHeap::new(),
            boxes: (0..n).map(|_| Mailbox::default()).collect(),
            inflight: HashMap::new(),
            data_order: Sequencer::default(),
            reply_order: Sequencer::default(),
            net: FlowNet::new(caps),
            fired: HashSet::new(),
            next_timer: 0,
            messages: 0,
        }
    }

    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.events.push(Reverse(Event {
            time,
            seq: self.seq,
            kind,
        }));
        self.seq += 1;
    }

    fn route(&self, src: usize, dst: usize) -> ([usize; 4], usize, u32) {
        let (ps, pd) = (src / self.hosts_per_pod, dst / self.hosts_per_pod);
        let up = 2 * src;
        let down = 2 * dst + 1;
        if ps == pd {
            ([up, down, 0, 0], 2, 1)
        } else {
            let base = 2 * self.n_hosts;
            ([up, base + 2 * ps, base + 2 * pd + 1, down], 4, 2)
        }
    }

    fn transfer(&mut self, src: usize, dst: usize, len: usize, arrival: Arrival) {
        self.messages += 1;
        let (links, n_links, hops) = self.route(src, dst);
        if len == 0 {
            let t = self.clock + f64::from(hops) * self.params.latency_s;
            self.schedule(t, EventKind::Arrive(arrival));
        } else {
            self.net.add(self.clock, &links[..n_links], len, hops, arrival);
        }
    }

    fn reply(&mut self, src: usize, requester: usize, tag: Tag, bytes: Bytes) {
        let seq = self.reply_order.issue((src, requester, tag));
        let len = bytes.len();
        self.transfer(
            src,
            requester,
            len,
            Arrival::PullReply {
                requester,
                src,
                tag,
                seq,
                bytes,
            },
        );
    }

    fn settle(&mut self) {
        if self.net.dirty {
            if let Some(t) = self.net.recompute() {
                let generation = self.net.generation;
                self.schedule(t, EventKind::FlowCheck { generation });
            }
        }
    }

    /// Processes the next event. Returns false when the queue is empty.
    fn step(&mut self) -> bool {
        let Some(Reverse(ev)) = self.events.pop() else {
            return false;
        };
        debug_assert!(ev.time >= self.clock);
        self.clock = self.clock.max(ev.time);
        match ev.kind {
            EventKind::FlowCheck { generation } => {
                if generation == self.net.generation {
                    for flow in self.net.take_finished(self.clock) {
                        let t = self.clock + f64::from(flow.hops) * self.params.latency_s;
                        self.schedule(t, EventKind::Arrive(flow.arrival));
                    }
                }
            }
            EventKind::Arrive(a) => self.arrive(a),
            EventKind::Timer { rank, id } => {
                self.fired.insert(id);
                self.boxes[rank].wake_all();
            }
        }
        true
    }

    fn arrive(&mut self, arrival: Arrival) {
        match arrival {
            Arrival::Data {
                src,
                dst,
                tag,
                seq,
                bytes,
            } => {
                let key = (src, dst, tag);
                if let Some(n) = self.inflight.get_mut(&key) {
                    *n -= 1;
                    if *n == 0 {
                        self.inflight.remove(&key);
                    }
                }
                self.boxes[src].wake_all();
                for b in self.data_order.accept(key, seq, bytes) {
                    self.boxes[dst].push_data(src, tag, b);
                }
            }
            Arrival::PullRequest {
                requester,
                src,
                tag,
            } => {
                if let Some(bytes) = self.boxes[src].request(requester, tag) {
                    self.reply(src, requester, tag, bytes);
                }
            }
            Arrival::PullReply {
                requester,
                src,
                tag,
                seq,
                bytes,
            } => {
                for b in self.reply_order.accept((src, requester, tag), seq, bytes) {
                    self.boxes[requester].push_reply(src, tag, b);
                }
            }
        }
    }

    fn pending_pull(&self) -> Option<(usize, Tag)> {
        self.boxes
            .iter()
            .enumerate()
            .find_map(|(r, b)| b.first_pending().map(|t| (r, t)))
    }
}

#[derive(Clone)]
pub(crate) struct SimHandle {
    core: Rc<RefCell<SimCore>>,
    rank: usize,
}

impl SimHandle {
    pub async fn send(&self, dst: usize, tag: Tag, payload: Bytes) -> Result<()> {
        let mut payload = Some(payload);
        poll_fn(|cx| {
            let mut core = self.core.borrow_mut();
            if core.boxes[self.rank].closed {
                return Poll::Ready(Err(Error::Closed));
            }
            let key = (self.rank, dst, tag);
            let budget = core.cfg.inflight_budget.max(1);
            if core.inflight.get(&key).copied().unwrap_or(0) >= budget {
                core.boxes[self.rank].register(cx.waker());
                return Poll::Pending;
            }
            *core.inflight.entry(key).or_default() += 1;
            let seq = core.data_order.issue(key);
            let bytes = payload.take().expect("send polled after completion");
            let len = bytes.len();
            core.transfer(
                self.rank,
                dst,
                len,
                Arrival::Data {
                    src: self.rank,
                    dst,
                    tag,
                    seq,
                    bytes,
                },
            );
            Poll::Ready(Ok(()))
        })
        .await
    }

    pub async fn recv(&self, src: usize, tag: Tag) -> Result<Bytes> {
        poll_fn(|cx| {
            let mut core = self.core.borrow_mut();
            let mb = &mut core.boxes[self.rank];
            if let Some(b) = mb.pop_data(src, tag) {
                return Poll::Ready(Ok(b));
            }
            if mb.closed {
                return Poll::Ready(Err(Error::Closed));
            }
            mb.register(cx.waker());
            Poll::Pending
        })
        .await
    }

    pub fn expose(&self, tag: Tag, bytes: Bytes, readers: usize) -> u64 {
        let mut core = self.core.borrow_mut();
        let (id, served) = core.boxes[self.rank].expose(tag, bytes, readers);
        for (requester, b) in served {
            core.reply(self.rank, requester, tag, b);
        }
        id
    }

    pub async fn drained(&self, id: u64) -> Result<()> {
        poll_fn(|cx| {
            let mut core = self.core.borrow_mut();
            let mb = &mut core.boxes[self.rank];
            if !mb.is_live(id) {
                return Poll::Ready(Ok(()));
            }
            mb.register(cx.waker());
            Poll::Pending
        })
        .await
    }

    pub async fn pull(&self, src: usize, tag: Tag) -> Result<Bytes> {
        {
            let mut core = self.core.borrow_mut();
            if core.boxes[self.rank].closed {
                return Err(Error::Closed);
            }
            core.messages += 1;
            let (_, _, hops) = core.route(self.rank, src);
            let t = core.clock + f64::from(hops) * core.params.latency_s;
            core.schedule(
                t,
                EventKind::Arrive(Arrival::PullRequest {
                    requester: self.rank,
                    src,
                    tag,
                }),
            );
        }
        poll_fn(|cx| {
            let mut core = self.core.borrow_mut();
            let mb = &mut core.boxes[self.rank];
            if let Some(b) = mb.pop_reply(src, tag) {
                return Poll::Ready(Ok(b));
            }
            if mb.closed {
                return Poll::Ready(Err(Error::Closed));
            }
            mb.register(cx.waker());
            Poll::Pending
        })
        .await
    }

    pub async fn compute(&self, seconds: f64) {
        if seconds.is_nan() || seconds <= 0.0 {
            return;
        }
        let id = {
            let mut core = self.core.borrow_mut();
            let id = core.next_timer;
            core.next_timer += 1;
            let t = core.clock + seconds;
            core.schedule(t, EventKind::Timer { rank: self.rank, id });
            id
        };
        poll_fn(|cx| {
            let mut core = self.core.borrow_mut();
            if core.fired.remove(&id) {
                return Poll::Ready(());
            }
            core.boxes[self.rank].register(cx.waker());
            Poll::Pending
        })
        .await
    }

    pub fn now(&self) -> f64 {
        self.core.borrow().clock
    }

    pub fn close(&self) {
        let mut core = self.core.borrow_mut();
        let mb = &mut core.boxes[self.rank];
        mb.closed = true;
        mb.wake_all();
    }
}

struct RankWaker {
    rank: usize,
    ready: Arc<Mutex<BTreeSet<usize>>>,
}

impl ArcWake for RankWaker {
    fn wake_by_ref(arc_self: &Arc<Self>) {
        arc_self
            .ready
            .lock()
            .expect("ready set poisoned")
            .insert(arc_self.rank);
    }
}

pub(crate) fn run<T, F, Fut>(
    n: usize,
    params: &SimParams,
    cfg: Arc<TransportConfig>,
    program: &F,
) -> Result<RunReport<T>>
where
    F: Fn(Endpoint) -> Fut,
    Fut: Future<Output = Result<T>>,
{
    params.validate()?;
    let core = Rc::new(RefCell::new(SimCore::new(n, params.clone(), cfg.clone())));
    let ready = Arc::new(Mutex::new((0..n).collect::<BTreeSet<_>>()));
    let wakers: Vec<Waker> = (0..n)
        .map(|rank| {
            waker(Arc::new(RankWaker {
                rank,
                ready: ready.clone(),
            }))
        })
        .collect();
    let mut tasks: Vec<Option<Pin<Box<Fut>>>> = (0..n)
        .map(|rank| {
            let handle = SimHandle {
                core: core.clone(),
                rank,
            };
            Some(Box::pin(program(Endpoint::new(
                rank,
                n,
                cfg.clone(),
                Inner::Sim(handle),
            ))))
        })
        .collect();
    let mut outcomes: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let mut finish = vec![0.0; n];
    let mut unfinished = n;

    loop {
        loop {
            let next = ready.lock().expect("ready set poisoned").pop_first();
            let Some(rank) = next else { break };
            let Some(task) = tasks[rank].as_mut() else {
                continue;
            };
            let mut cx = Context::from_waker(&wakers[rank]);
            if let Poll::Ready(out) = task.as_mut().poll(&mut cx) {
                tasks[rank] = None;
                finish[rank] = core.borrow().clock;
                outcomes[rank] = Some(out);
                unfinished -= 1;
            }
        }
        if unfinished == 0 {
            break;
        }
        let progressed = {
            let mut c = core.borrow_mut();
            c.settle();
            c.step()
        };
        if !progressed {
            if let Some(pos) = outcomes.iter().position(|o| matches!(o, Some(Err(_)))) {
                if let Some(Err(e)) = outcomes[pos].take() {
                    return Err(e);
                }
            }
            if let Some((src, tag)) = core.borrow().pending_pull() {
                return Err(Error::NotExposed { src, tag });
            }
            return Err(Error::DeadlockDetected { unfinished });
        }
    }
    drop(tasks);

    let mut results = Vec::with_capacity(n);
    for out in outcomes {
        results.push(out.expect("every rank finished")?);
    }
    let messages = core.borrow().messages;
    let elapsed_s = finish.iter().copied().fold(0.0, f64::max);
    Ok(RunReport {
        results,
        finish_s: finish,
        elapsed_s,
        messages,
    })
}
