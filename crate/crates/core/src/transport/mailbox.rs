use std::collections::{HashMap, HashSet, VecDeque};
use std::task::Waker;

use bytes::Bytes;

use super::Tag;

struct Exposure {
    id: u64,
    bytes: Bytes,
    readers: usize,
}

/// Per-rank receive state: point-to-point queues, pull replies, and the
/// buffers this rank exposes for remote reads. Backend agnostic; the sim
/// drives it single-threaded and the thread/TCP backends wrap it in a mutex.
#[derive(Default)]
pub(crate) struct Mailbox {
    data: HashMap<(usize, Tag), VecDeque<Bytes>>,
    replies: HashMap<(usize, Tag), VecDeque<Bytes>>,
    exposed: HashMap<Tag, VecDeque<Exposure>>,
    pending: HashMap<Tag, VecDeque<usize>>,
    live: HashSet<u64>,
    next_id: u64,
    wakers: Vec<Waker>,
    pub closed: bool,
}

impl Mailbox {
    pub fn push_data(&mut self, src: usize, tag: Tag, bytes: Bytes) {
        self.data.entry((src, tag)).or_default().push_back(bytes);
        self.wake_all();
    }

    pub fn pop_data(&mut self, src: usize, tag: Tag) -> Option<Bytes> {
        pop_keyed(&mut self.data, (src, tag))
    }

    pub fn push_reply(&mut self, src: usize, tag: Tag, bytes: Bytes) {
        self.replies.entry((src, tag)).or_default().push_back(bytes);
        self.wake_all();
    }

    pub fn pop_reply(&mut self, src: usize, tag: Tag) -> Option<Bytes> {
        pop_keyed(&mut self.replies, (src, tag))
    }

    /// A remote read of `tag` by `requester`: served from the oldest exposure
    /// under that tag, or queued until one is exposed.
    pub fn request(&mut self, requester: usize, tag: Tag) -> Option<Bytes> {
        match self.take_exposed(tag) {
            Some(bytes) => Some(bytes),
            None => {
                self.pending.entry(tag).or_default().push_back(requester);
                None
            }
        }
    }

    fn take_exposed(&mut self, tag: Tag) -> Option<Bytes> {
        let queue = self.exposed.get_mut(&tag)?;
        let front = queue.front_mut()?;
        let bytes = front.bytes.clone();
        front.readers -= 1;
        if front.readers == 0 {
            let id = front.id;
            queue.pop_front();
            if queue.is_empty() {
                self.exposed.remove(&tag);
            }
            self.live.remove(&id);
            self.wake_all();
        }
        Some(bytes)
    }

    /// Registers `bytes` for `readers` remote reads. Returns the exposure id
    /// and the queued requests it satisfied right away.
    pub fn expose(&mut self, tag: Tag, bytes: Bytes, readers: usize) -> (u64, Vec<(usize, Bytes)>) {
        let id = self.next_id;
        self.next_id += 1;
        if readers == 0 {
            return (id, Vec::new());
        }
        self.live.insert(id);
        self.exposed.entry(tag).or_default().push_back(Exposure {
            id,
            bytes,
            readers,
        });
        let mut served = Vec::new();
        while let Some(requester) = self.pending.get_mut(&tag).and_then(|q| q.pop_front()) {
            match self.take_exposed(tag) {
                Some(b) => served.push((requester, b)),
                None => {
                    self.pending.entry(tag).or_default().push_front(requester);
                    break;
                }
            }
        }
        if self.pending.get(&tag).is_some_and(|q| q.is_empty()) {
            self.pending.remove(&tag);
        }
        (id, served)
    }

    pub fn is_live(&self, id: u64) -> bool {
        self.live.contains(&id)
    }

    pub fn first_pending(&self) -> Option<Tag> {
        self.pending
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(t, _)| *t)
            .min()
    }

    pub fn register(&mut self, waker: &Waker) {
        if !self.wakers.iter().any(|w| w.will_wake(waker)) {
            self.wakers.push(waker.clone());
        }
    }

    pub fn wake_all(&mut self) {
        for w in self.wakers.drain(..) {
            w.wake();
        }
    }
}

fn pop_keyed<K: std::hash::Hash + Eq>(map: &mut HashMap<K, VecDeque<Bytes>>, key: K) -> Option<Bytes> {
    let queue = map.get_mut(&key)?;
    let item = queue.pop_front();
    if queue.is_empty() {
        map.remove(&key);
    }
    item
}
