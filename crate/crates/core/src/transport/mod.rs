//! Point-to-point messaging between ranks.
//!
//! Every backend offers the same [`Endpoint`] contract: tagged `send`/`recv`
//! with FIFO order per `(src, dst, tag)` channel, and one-sided `pull` of a
//! buffer the remote rank has `expose`d. Rank programs are `async`, so the
//! simulated backend can run all ranks cooperatively on one thread and
//! advance a virtual clock, while the thread and TCP backends block on real
//! queues and sockets.

mod mailbox;
pub mod local;
pub mod sim;
pub mod tcp;

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;

use crate::error::{Error, Result};
use crate::topology::RankId;

pub use sim::SimParams;

/// Message tag. The two high bits are reserved for pull traffic on the wire.
pub type Tag = u32;

/// Largest tag a program may use.
pub const MAX_TAG: Tag = (1 << 30) - 1;

#[derive(Clone, Debug)]
pub struct TransportConfig {
    /// Largest payload accepted by a single `send` or exposure.
    pub max_segment_bytes: usize,
    /// Undelivered messages allowed per channel before `send` waits.
    pub inflight_budget: usize,
    /// How long a pull waits for the remote exposure on real backends.
    pub pull_timeout: Duration,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            max_segment_bytes: 4 << 20,
            inflight_budget: 16,
            pull_timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Backend {
    /// Deterministic discrete-event fat-tree model with a virtual clock.
    Sim(SimParams),
    /// One OS thread per rank, in-process queues.
    Threads,
    /// One OS thread per rank, loopback TCP sockets.
    Tcp,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Sim(_) => "sim",
            Backend::Threads => "threads",
            Backend::Tcp => "tcp",
        }
    }
}

/// Outcome of [`run_ranks`].
#[derive(Clone, Debug)]
pub struct RunReport<T> {
    pub results: Vec<T>,
    /// Per-rank completion time: virtual seconds on the simulator, wall
    /// seconds since start otherwise.
    pub finish_s: Vec<f64>,
    /// Latest completion time over all ranks.
    pub elapsed_s: f64,
    /// Messages that crossed the network (simulator only; 0 elsewhere).
    pub messages: u64,
}

#[derive(Clone)]
enum Inner {
    Sim(sim::SimHandle),
    Wire(local::WireHandle),
}

/// A rank's handle onto the transport, possibly restricted to a subgroup.
#[derive(Clone)]
pub struct Endpoint {
    /// Global rank of each member, indexed by local rank.
    members: Arc<[RankId]>,
    rank: RankId,
    cfg: Arc<TransportConfig>,
    inner: Inner,
}

impl Endpoint {
    fn new(rank: RankId, n_ranks: usize, cfg: Arc<TransportConfig>, inner: Inner) -> Self {
        Self {
            members: (0..n_ranks).collect(),
            rank,
            cfg,
            inner,
        }
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// This rank's index in the world communicator.
    pub fn global_rank(&self) -> RankId {
        self.members[self.rank]
    }

    pub fn config(&self) -> &TransportConfig {
        &self.cfg
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self.inner, Inner::Sim(_))
    }

    /// Endpoint over the subset `members` (local ranks of `self`, ascending
    /// order not required). The caller must be a member.
    pub fn subgroup(&self, members: &[RankId]) -> Result<Endpoint> {
        let rank = members
            .iter()
            .position(|&m| m == self.rank)
            .ok_or_else(|| Error::InvalidConfig(format!("rank {} not in subgroup", self.rank)))?;
        if let Some(&bad) = members.iter().find(|&&m| m >= self.size()) {
            return Err(Error::InvalidConfig(format!("subgroup member {bad} out of range")));
        }
        Ok(Endpoint {
            members: members.iter().map(|&m| self.members[m]).collect(),
            rank,
            cfg: self.cfg.clone(),
            inner: self.inner.clone(),
        })
    }

    fn peer(&self, local: RankId) -> Result<RankId> {
        if local == self.rank {
            return Err(Error::InvalidConfig(format!("rank {local} addressed itself")));
        }
        self.members
            .get(local)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("rank {local} out of range")))
    }

    fn check_tag(tag: Tag) -> Result<()> {
        if tag > MAX_TAG {
            return Err(Error::InvalidConfig(format!("tag {tag:#x} exceeds {MAX_TAG:#x}")));
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_segment_bytes {
            return Err(Error::MessageTooLarge {
                len,
                max: self.cfg.max_segment_bytes,
            });
        }
        Ok(())
    }

    /// Queues `payload` for `dst`. Returns once the message is in flight; waits
    /// only when the channel already has `inflight_budget` undelivered messages.
    pub async fn send(&self, dst: RankId, tag: Tag, payload: Bytes) -> Result<()> {
        let dst = self.peer(dst)?;
        Self::check_tag(tag)?;
        self.check_len(payload.len())?;
        match &self.inner {
            Inner::Sim(h) => h.send(dst, tag, payload).await,
            Inner::Wire(h) => h.send(dst, tag, payload),
        }
    }

    /// Waits for the next message from `src` under `tag`.
    pub async fn recv(&self, src: RankId, tag: Tag) -> Result<Bytes> {
        let src = self.peer(src)?;
        Self::check_tag(tag)?;
        match &self.inner {
            Inner::Sim(h) => h.recv(src, tag).await,
            Inner::Wire(h) => h.recv(src, tag).await,
        }
    }

    /// Makes `bytes` readable by `readers` remote pulls under `tag`. Several
    /// exposures under one tag are served oldest first. Returns an id for
    /// [`Endpoint::drained`].
    pub fn expose(&self, tag: Tag, bytes: Bytes, readers: usize) -> Result<u64> {
        Self::check_tag(tag)?;
        self.check_len(bytes.len())?;
        match &self.inner {
            Inner::Sim(h) => Ok(h.expose(tag, bytes, readers)),
            Inner::Wire(h) => h.expose(tag, bytes, readers),
        }
    }

    /// Resolves once every reader of exposure `id` has taken its copy.
    pub async fn drained(&self, id: u64) -> Result<()> {
        match &self.inner {
            Inner::Sim(h) => h.drained(id).await,
            Inner::Wire(h) => h.drained(id).await,
        }
    }

    /// Exposes `bytes` and waits until all `readers` have pulled them.
    pub async fn serve(&self, tag: Tag, bytes: Bytes, readers: usize) -> Result<()> {
        let id = self.expose(tag, bytes, readers)?;
        self.drained(id).await
    }

    /// One-sided read of the buffer `src` exposed under `tag`.
    pub async fn pull(&self, src: RankId, tag: Tag, expected_len: usize) -> Result<Bytes> {
        let src = self.peer(src)?;
        Self::check_tag(tag)?;
        let bytes = match &self.inner {
            Inner::Sim(h) => h.pull(src, tag).await?,
            Inner::Wire(h) => h.pull(src, tag).await?,
        };
        if bytes.len() != expected_len {
            return Err(Error::LengthMismatch(format!(
                "pulled {} bytes from rank {src} tag {tag:#x}, expected {expected_len}",
                bytes.len()
            )));
        }
        Ok(bytes)
    }

    /// Accounts `seconds` of local computation. Advances the virtual clock on
    /// the simulator; real backends spend real time instead, so this is a no-op.
    pub async fn compute(&self, seconds: f64) {
        if let Inner::Sim(h) = &self.inner {
            h.compute(seconds).await;
        }
    }

    /// Seconds since the run started (virtual on the simulator).
    pub fn now(&self) -> f64 {
        match &self.inner {
            Inner::Sim(h) => h.now(),
            Inner::Wire(h) => h.now(),
        }
    }

    /// Marks this rank's endpoint closed: later sends fail and blocked
    /// receives on it return [`Error::Closed`].
    pub fn close(&self) {
        match &self.inner {
            Inner::Sim(h) => h.close(),
            Inner::Wire(h) => h.close(),
        }
    }
}

/// Runs `program` on every rank of an `n_ranks` communicator and collects
/// each rank's result. The first failing rank (lowest index) decides the
/// returned error.
pub fn run_ranks<T, F, Fut>(
    n_ranks: usize,
    backend: &Backend,
    cfg: &TransportConfig,
    program: F,
) -> Result<RunReport<T>>
where
    T: Send,
    F: Fn(Endpoint) -> Fut + Sync,
    Fut: Future<Output = Result<T>>,
{
    if n_ranks == 0 {
        return Err(Error::InvalidConfig("need at least one rank".into()));
    }
    let cfg = Arc::new(cfg.clone());
    match backend {
        Backend::Sim(params) => sim::run(n_ranks, params, cfg, &program),
        Backend::Threads => local::run(n_ranks, cfg, &program),
        Backend::Tcp => tcp::run(n_ranks, cfg, &program),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backends() -> Vec<Backend> {
        vec![Backend::Sim(SimParams::default()), Backend::Threads, Backend::Tcp]
    }

    #[test]
    fn echo_on_every_backend() {
        for b in backends() {
            let report = run_ranks(2, &b, &TransportConfig::default(), |ep| async move {
                if ep.rank() == 0 {
                    ep.send(1, 7, Bytes::from_static(b"abc")).await?;
                    Ok(Bytes::new())
                } else {
                    ep.recv(0, 7).await
                }
            })
            .unwrap();
            assert_eq!(report.results[1], "abc", "{}", b.name());
        }
    }

    #[test]
    fn single_rank_returns_rank() {
        for b in backends() {
            let r = run_ranks(1, &b, &TransportConfig::default(), |ep| async move { Ok(ep.rank()) })
                .unwrap();
            assert_eq!(r.results, vec![0]);
        }
    }

    #[test]
    fn all_pairs_barrier_finishes() {
        for b in backends() {
            let r = run_ranks(4, &b, &TransportConfig::default(), |ep| async move {
                for p in (0..ep.size()).filter(|&p| p != ep.rank()) {
                    ep.send(p, 1, Bytes::from(vec![ep.rank() as u8])).await?;
                }
                let mut sum = 0u32;
                for p in (0..ep.size()).filter(|&p| p != ep.rank()) {
                    sum += u32::from(ep.recv(p, 1).await?[0]);
                }
                Ok(sum)
            })
            .unwrap();
            assert_eq!(r.results, vec![6, 5, 4, 3]);
            if matches!(b, Backend::Sim(_)) {
                assert!(r.elapsed_s > 0.0);
            }
        }
    }

    #[test]
    fn fifo_per_channel_with_mixed_sizes() {
        for b in backends() {
            let r = run_ranks(2, &b, &TransportConfig::default(), |ep| async move {
                let sizes = [1 << 20, 1, 4096, 0, 70_000, 3];
                if ep.rank() == 0 {
                    for (i, &s) in sizes.iter().enumerate() {
                        ep.send(1, 5, Bytes::from(vec![i as u8; s])).await?;
                    }
                    Ok(vec![])
                } else {
                    let mut got = Vec::new();
                    for _ in sizes {
                        got.push(ep.recv(0, 5).await?.len());
                    }
                    Ok(got)
                }
            })
            .unwrap();
            assert_eq!(r.results[1], vec![1 << 20, 1, 4096, 0, 70_000, 3], "{}", b.name());
        }
    }

    #[test]
    fn pull_reads_exposed_buffers() {
        for b in backends() {
            let r = run_ranks(2, &b, &TransportConfig::default(), |ep| async move {
                if ep.rank() == 1 {
                    ep.serve(3, Bytes::from_static(&[1, 2, 3, 4, 5, 6, 7, 8]), 1).await?;
                    ep.serve(4, Bytes::new(), 1).await?;
                    Ok((Bytes::new(), Bytes::new()))
                } else {
                    let a = ep.pull(1, 3, 8).await?;
                    let e = ep.pull(1, 4, 0).await?;
                    Ok((a, e))
                }
            })
            .unwrap();
            assert_eq!(&r.results[0].0[..], &[1, 2, 3, 4, 5, 6, 7, 8]);
            assert!(r.results[0].1.is_empty());
        }
    }

    #[test]
    fn pull_length_is_checked() {
        let err = run_ranks(
            2,
            &Backend::Sim(SimParams::default()),
            &TransportConfig::default(),
            |ep| async move {
                if ep.rank() == 1 {
                    ep.serve(3, Bytes::from_static(b"abcd"), 1).await
                } else {
                    ep.pull(1, 3, 5).await.map(|_| ())
                }
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::LengthMismatch(_)));
    }

    #[test]
    fn oversized_and_self_sends_rejected() {
        let cfg = TransportConfig {
            max_segment_bytes: 8,
            ..Default::default()
        };
        let r = run_ranks(2, &Backend::Threads, &cfg, |ep| async move {
            if ep.rank() == 0 {
                let big = ep.send(1, 0, Bytes::from(vec![0; 9])).await;
                let own = ep.send(0, 0, Bytes::new()).await;
                let tag = ep.send(1, MAX_TAG + 1, Bytes::new()).await;
                Ok(vec![
                    matches!(big, Err(Error::MessageTooLarge { .. })),
                    matches!(own, Err(Error::InvalidConfig(_))),
                    matches!(tag, Err(Error::InvalidConfig(_))),
                ])
            } else {
                Ok(vec![true; 3])
            }
        })
        .unwrap();
        assert_eq!(r.results[0], vec![true; 3]);
    }

    #[test]
    fn subgroup_translates_ranks() {
        for b in backends() {
            let r = run_ranks(4, &b, &TransportConfig::default(), |ep| async move {
                // Pairs {0, 2} and {1, 3}.
                let members = if ep.rank() % 2 == 0 { [0, 2] } else { [1, 3] };
                let sub = ep.subgroup(&members)?;
                let peer = 1 - sub.rank();
                sub.send(peer, 2, Bytes::from(vec![ep.rank() as u8])).await?;
                Ok(sub.recv(peer, 2).await?[0])
            })
            .unwrap();
            assert_eq!(r.results, vec![2, 3, 0, 1], "{}", b.name());
        }
    }
}
