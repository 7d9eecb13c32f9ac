//! TCP backend.
//!
//! Wire frame, all integers little-endian:
//!
//! ```text
//! u64 payload length | u32 src | u32 dst | u32 tag | payload
//! ```
//!
//! The top two tag bits mark pull traffic: `0b10` is a pull request for the
//! tag in the low 30 bits (empty payload), `0b11` the matching reply. Every
//! rank opens one outgoing connection per peer, announced by a 4-byte rank
//! hello, and reads the peers' outgoing connections on per-peer threads.
//! Those reader threads also serve pull requests, so a rank does not need
//! to be inside a transport call for its exposed buffers to be read.

use std::future::Future;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use bytes::Bytes;

use super::local::{drive, RankBox, Wire, WireHandle};
use super::{Endpoint, Inner, RunReport, Tag, TransportConfig, MAX_TAG};
use crate::error::{Error, Result};

const KIND_MASK: u32 = 0b11 << 30;
const PULL_REQUEST: u32 = 0b10 << 30;
const PULL_REPLY: u32 = 0b11 << 30;
const HEADER_BYTES: usize = 20;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub src: u32,
    pub dst: u32,
    pub tag: u32,
    pub payload: Bytes,
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    let mut header = [0u8; HEADER_BYTES];
    header[..8].copy_from_slice(&(frame.payload.len() as u64).to_le_bytes());
    header[8..12].copy_from_slice(&frame.src.to_le_bytes());
    header[12..16].copy_from_slice(&frame.dst.to_le_bytes());
    header[16..20].copy_from_slice(&frame.tag.to_le_bytes());
    w.write_all(&header)?;
    w.write_all(&frame.payload)
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Frame>> {
    let mut header = [0u8; HEADER_BYTES];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let word = |at: usize| u32::from_le_bytes(header[at..at + 4].try_into().expect("4 bytes"));
    let len = u64::from_le_bytes(header[..8].try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| io::Error::new(ErrorKind::InvalidData, "frame too long"))?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(Frame {
        src: word(8),
        dst: word(12),
        tag: word(16),
        payload: payload.into(),
    }))
}

/// Parses a rendezvous file: one `host:port` per line, line `i` is rank `i`.
/// Blank lines and `#` comments are skipped.
pub fn read_hostfile(path: &Path) -> Result<Vec<SocketAddr>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.to_socket_addrs()
                .map_err(|e| Error::PeerUnreachable(format!("{l}: {e}")))?
                .next()
                .ok_or_else(|| Error::PeerUnreachable(l.to_string()))
        })
        .collect()
}

struct TcpWire {
    writers: Vec<Option<Sender<Frame>>>,
}

impl TcpWire {
    fn push(&self, to: usize, frame: Frame) -> Result<()> {
        self.writers
            .get(to)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::PeerUnreachable(format!("rank {to}")))?
            .send(frame)
            .map_err(|_| Error::PeerUnreachable(format!("rank {to}")))
    }
}

impl Wire for TcpWire {
    fn send_data(&self, src: usize, dst: usize, tag: Tag, bytes: Bytes) -> Result<()> {
        self.push(
            dst,
            Frame {
                src: src as u32,
                dst: dst as u32,
                tag,
                payload: bytes,
            },
        )
    }

    fn request_pull(&self, requester: usize, src: usize, tag: Tag) -> Result<()> {
        self.push(
            src,
            Frame {
                src: requester as u32,
                dst: src as u32,
                tag: tag | PULL_REQUEST,
                payload: Bytes::new(),
            },
        )
    }

    fn send_reply(&self, src: usize, requester: usize, tag: Tag, bytes: Bytes) -> Result<()> {
        self.push(
            requester,
            Frame {
                src: src as u32,
                dst: requester as u32,
                tag: tag | PULL_REPLY,
                payload: bytes,
            },
        )
    }
}

fn writer_loop(stream: TcpStream, frames: Receiver<Frame>) {
    let mut out = BufWriter::with_capacity(1 << 16, &stream);
    'outer: while let Ok(first) = frames.recv() {
        let mut next = Some(first);
        while let Some(frame) = next {
            if write_frame(&mut out, &frame).is_err() {
                break 'outer;
            }
            next = frames.try_recv().ok();
        }
        if out.flush().is_err() {
            break;
        }
    }
    let _ = out.flush();
    drop(out);
    let _ = stream.shutdown(Shutdown::Write);
}

fn reader_loop(rank: usize, stream: TcpStream, own: Arc<RankBox>, wire: Weak<TcpWire>) {
    let mut input = BufReader::with_capacity(1 << 16, stream);
    while let Ok(Some(frame)) = read_frame(&mut input) {
        let src = frame.src as usize;
        let tag = frame.tag & MAX_TAG;
        match frame.tag & KIND_MASK {
            PULL_REQUEST => {
                let served = own.lock().request(src, tag);
                if let (Some(b), Some(w)) = (served, wire.upgrade()) {
                    let _ = w.send_reply(rank, src, tag, b);
                }
            }
            PULL_REPLY => own.lock().push_reply(src, tag, frame.payload),
            _ => own.lock().push_data(src, tag, frame.payload),
        }
    }
}

fn connect_with_retry(addr: SocketAddr, deadline: Instant) -> Result<TcpStream> {
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(Error::PeerUnreachable(format!("{addr}: {e}")))
            }
            Err(_) => std::thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn establish(
    rank: usize,
    listener: TcpListener,
    addrs: &[SocketAddr],
    cfg: &TransportConfig,
    start: Instant,
) -> Result<WireHandle> {
    let n = addrs.len();
    let deadline = Instant::now() + CONNECT_TIMEOUT;
    let mut writers = Vec::with_capacity(n);
    for (peer, &addr) in addrs.iter().enumerate() {
        if peer == rank {
            writers.push(None);
            continue;
        }
        let mut stream = connect_with_retry(addr, deadline)?;
        stream.set_nodelay(true)?;
        stream.write_all(&(rank as u32).to_le_bytes())?;
        let (tx, rx) = channel();
        std::thread::spawn(move || writer_loop(stream, rx));
        writers.push(Some(tx));
    }
    let wire = Arc::new(TcpWire { writers });
    let own = Arc::new(RankBox::default());

    listener.set_nonblocking(true)?;
    let mut accepted = 0;
    while accepted + 1 < n {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                let mut hello = [0u8; 4];
                stream.read_exact(&mut hello)?;
                let peer = u32::from_le_bytes(hello) as usize;
                if peer >= n || peer == rank {
                    return Err(Error::PeerUnreachable(format!("bad hello from rank {peer}")));
                }
                let (own, weak) = (own.clone(), Arc::downgrade(&wire));
                std::thread::spawn(move || reader_loop(rank, stream, own, weak));
                accepted += 1;
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::PeerUnreachable(format!(
                        "only {accepted} of {} peers connected",
                        n - 1
                    )));
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(WireHandle {
        rank,
        own,
        wire,
        start,
        pull_timeout: cfg.pull_timeout,
    })
}

/// Joins a TCP communicator as `rank`, listening on `addrs[rank]`.
pub fn connect(rank: usize, addrs: &[SocketAddr], cfg: &TransportConfig) -> Result<Endpoint> {
    if rank >= addrs.len() {
        return Err(Error::InvalidConfig(format!(
            "rank {rank} not in a {}-entry host list",
            addrs.len()
        )));
    }
    let listener = TcpListener::bind(addrs[rank])?;
    let handle = establish(rank, listener, addrs, cfg, Instant::now())?;
    let own = Arc::downgrade(&handle.own);
    super::local::spawn_heartbeat(vec![own], Arc::default());
    Ok(Endpoint::new(
        rank,
        addrs.len(),
        Arc::new(cfg.clone()),
        Inner::Wire(handle),
    ))
}

pub(crate) fn run<T, F, Fut>(n: usize, cfg: Arc<TransportConfig>, program: &F) -> Result<RunReport<T>>
where
    T: Send,
    F: Fn(Endpoint) -> Fut + Sync,
    Fut: Future<Output = Result<T>>,
{
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<io::Result<Vec<_>>>()?;
    let addrs = listeners
        .iter()
        .map(TcpListener::local_addr)
        .collect::<io::Result<Vec<_>>>()?;
    let start = Instant::now();
    let handles = std::thread::scope(|s| {
        let joins: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(rank, l)| {
                let (addrs, cfg) = (&addrs, &cfg);
                s.spawn(move || establish(rank, l, addrs, cfg, start))
            })
            .collect();
        joins
            .into_iter()
            .map(|j| j.join().expect("connect thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    drive(handles, cfg, program)
}
