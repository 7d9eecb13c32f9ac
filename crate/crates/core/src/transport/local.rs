//! In-process backend: one OS thread per rank, shared mailboxes.
//!
//! [`WireHandle`] is also the rank-side half of the TCP backend; the two
//! differ only in how a message reaches the peer's mailbox.

use std::future::Future;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, Weak};
use std::task::Poll;
use std::time::{Duration, Instant};

use bytes::Bytes;
use futures::executor::block_on;
use futures::future::poll_fn;

use super::mailbox::Mailbox;
use super::{Endpoint, Inner, RunReport, Tag, TransportConfig};
use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct RankBox(Mutex<Mailbox>);

impl RankBox {
    pub fn lock(&self) -> MutexGuard<'_, Mailbox> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// How bytes leave a rank.
pub(crate) trait Wire: Send + Sync {
    fn send_data(&self, src: usize, dst: usize, tag: Tag, bytes: Bytes) -> Result<()>;
    fn request_pull(&self, requester: usize, src: usize, tag: Tag) -> Result<()>;
    fn send_reply(&self, src: usize, requester: usize, tag: Tag, bytes: Bytes) -> Result<()>;
}

#[derive(Clone)]
pub(crate) struct WireHandle {
    pub rank: usize,
    pub own: Arc<RankBox>,
    pub wire: Arc<dyn Wire>,
    pub start: Instant,
    pub pull_timeout: Duration,
}

impl WireHandle {
    pub fn send(&self, dst: usize, tag: Tag, bytes: Bytes) -> Result<()> {
        if self.own.lock().closed {
            return Err(Error::Closed);
        }
        self.wire.send_data(self.rank, dst, tag, bytes)
    }

    pub async fn recv(&self, src: usize, tag: Tag) -> Result<Bytes> {
        poll_fn(|cx| {
            let mut mb = self.own.lock();
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

    pub fn expose(&self, tag: Tag, bytes: Bytes, readers: usize) -> Result<u64> {
        let (id, served) = self.own.lock().expose(tag, bytes, readers);
        for (requester, b) in served {
            self.wire.send_reply(self.rank, requester, tag, b)?;
        }
        Ok(id)
    }

    pub async fn drained(&self, id: u64) -> Result<()> {
        poll_fn(|cx| {
            let mut mb = self.own.lock();
            if !mb.is_live(id) {
                return Poll::Ready(Ok(()));
            }
            if mb.closed {
                return Poll::Ready(Err(Error::Closed));
            }
            mb.register(cx.waker());
            Poll::Pending
        })
        .await
    }

    pub async fn pull(&self, src: usize, tag: Tag) -> Result<Bytes> {
        if self.own.lock().closed {
            return Err(Error::Closed);
        }
        self.wire.request_pull(self.rank, src, tag)?;
        let deadline = Instant::now() + self.pull_timeout;
        poll_fn(|cx| {
            let mut mb = self.own.lock();
            if let Some(b) = mb.pop_reply(src, tag) {
                return Poll::Ready(Ok(b));
            }
            if mb.closed {
                return Poll::Ready(Err(Error::Closed));
            }
            if Instant::now() >= deadline {
                return Poll::Ready(Err(Error::NotExposed { src, tag }));
            }
            mb.register(cx.waker());
            Poll::Pending
        })
        .await
    }

    pub fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn close(&self) {
        let mut mb = self.own.lock();
        mb.closed = true;
        mb.wake_all();
    }
}

/// Periodically wakes every waiter so time-based checks (pull timeouts)
/// run even when no message arrives. Stops once all boxes are gone.
pub(crate) fn spawn_heartbeat(boxes: Vec<Weak<RankBox>>, stop: Arc<AtomicBool>) {
    std::thread::spawn(move || loop {
        std::thread::sleep(Duration::from_millis(25));
        if stop.load(Ordering::Relaxed) {
            return;
        }
        let mut alive = false;
        for b in boxes.iter().filter_map(Weak::upgrade) {
            alive = true;
            b.lock().wake_all();
        }
        if !alive {
            return;
        }
    });
}

struct LocalWire {
    boxes: Vec<Arc<RankBox>>,
}

impl Wire for LocalWire {
    fn send_data(&self, src: usize, dst: usize, tag: Tag, bytes: Bytes) -> Result<()> {
        self.boxes[dst].lock().push_data(src, tag, bytes);
        Ok(())
    }

    fn request_pull(&self, requester: usize, src: usize, tag: Tag) -> Result<()> {
        let served = self.boxes[src].lock().request(requester, tag);
        if let Some(b) = served {
            self.send_reply(src, requester, tag, b)?;
        }
        Ok(())
    }

    fn send_reply(&self, src: usize, requester: usize, tag: Tag, bytes: Bytes) -> Result<()> {
        self.boxes[requester].lock().push_reply(src, tag, bytes);
        Ok(())
    }
}

/// Drives each rank's future to completion on its own thread and gathers
/// results in rank order. A failing rank closes every mailbox so peers
/// blocked on it return instead of hanging.
pub(crate) fn drive<T, F, Fut>(
    handles: Vec<WireHandle>,
    cfg: Arc<TransportConfig>,
    program: &F,
) -> Result<RunReport<T>>
where
    T: Send,
    F: Fn(Endpoint) -> Fut + Sync,
    Fut: Future<Output = Result<T>>,
{
    let n = handles.len();
    let all: Vec<Arc<RankBox>> = handles.iter().map(|h| h.own.clone()).collect();
    let stop = Arc::new(AtomicBool::new(false));
    spawn_heartbeat(all.iter().map(Arc::downgrade).collect(), stop.clone());

    let outcomes: Vec<(Result<T>, f64)> = std::thread::scope(|s| {
        let joins: Vec<_> = handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| {
                let all = &all;
                let cfg = cfg.clone();
                s.spawn(move || {
                    let start = h.start;
                    let ep = Endpoint::new(rank, n, cfg, Inner::Wire(h));
                    let out = block_on(program(ep));
                    if out.is_err() {
                        for b in all {
                            let mut mb = b.lock();
                            mb.closed = true;
                            mb.wake_all();
                        }
                    }
                    (out, start.elapsed().as_secs_f64())
                })
            })
            .collect();
        joins
            .into_iter()
            .map(|j| j.join().expect("rank thread panicked"))
            .collect()
    });
    stop.store(true, Ordering::Relaxed);

    // Prefer a root-cause error over the `Closed` errors it triggered in peers.
    if let Some(pos) = outcomes
        .iter()
        .position(|(o, _)| matches!(o, Err(e) if !matches!(e, Error::Closed)))
        .or_else(|| outcomes.iter().position(|(o, _)| o.is_err()))
    {
        let mut outcomes = outcomes;
        return Err(outcomes.swap_remove(pos).0.err().expect("error outcome"));
    }
    let finish_s: Vec<f64> = outcomes.iter().map(|(_, t)| *t).collect();
    let elapsed_s = finish_s.iter().copied().fold(0.0, f64::max);
    let results = outcomes.into_iter().map(|(o, _)| o.ok().expect("checked")).collect();
    Ok(RunReport {
        results,
        finish_s,
        elapsed_s,
        messages: 0,
    })
}

pub(crate) fn run<T, F, Fut>(n: usize, cfg: Arc<TransportConfig>, program: &F) -> Result<RunReport<T>>
where
    T: Send,
    F: Fn(Endpoint) -> Fut + Sync,
    Fut: Future<Output = Result<T>>,
{
    let boxes: Vec<Arc<RankBox>> = (0..n).map(|_| Arc::new(RankBox::default())).collect();
    let wire: Arc<dyn Wire> = Arc::new(LocalWire {
        boxes: boxes.clone(),
    });
    let start = Instant::now();
    let handles = boxes
        .into_iter()
        .enumerate()
        .map(|(rank, own)| WireHandle {
            rank,
            own,
            wire: wire.clone(),
            start,
            pull_timeout: cfg.pull_timeout,
        })
        .collect();
    drive(handles, cfg, program)
}
