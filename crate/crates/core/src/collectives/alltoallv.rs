//! Variable-length personalized exchange.

use bytes::{Bytes, BytesMut};
use futures::future::{join, try_join_all};

use super::tree::decode_u64;
use super::{collective_tag, TagKind};
use crate::error::{Error, Result};
use crate::transport::Endpoint;

/// Largest legal slice, in bytes. Lengths are carried as signed 32-bit
/// counts by the classic interfaces this mirrors, so 2^31 and up overflow.
pub const MAX_SLICE_BYTES: u64 = (1 << 31) - 1;

/// A send or receive buffer for [`alltoallv`]: slice `i` is
/// `data[offsets[i]..offsets[i] + lengths[i]]` and belongs to rank `i`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VarPayload {
    pub data: Vec<u8>,
    pub lengths: Vec<u64>,
    pub offsets: Vec<u64>,
}

impl VarPayload {
    /// Packs one slice per rank back to back.
    pub fn from_slices<S: AsRef<[u8]>>(slices: &[S]) -> Self {
        let mut out = VarPayload::default();
        for s in slices {
            let s = s.as_ref();
            out.offsets.push(out.data.len() as u64);
            out.lengths.push(s.len() as u64);
            out.data.extend_from_slice(s);
        }
        out
    }

    pub fn n_slices(&self) -> usize {
        self.lengths.len()
    }

    pub fn slice(&self, i: usize) -> &[u8] {
        let start = self.offsets[i] as usize;
        &self.data[start..start + self.lengths[i] as usize]
    }

    pub fn total_len(&self) -> u64 {
        self.lengths.iter().sum()
    }

    /// Checks the slice bound first (so it can be tested without backing
    /// data), then that slices are in order, disjoint and inside `data`.
    pub fn validate(&self) -> Result<()> {
        if let Some(&len) = self.lengths.iter().find(|&&l| l > MAX_SLICE_BYTES) {
            return Err(Error::OffsetOverflow(len));
        }
        if self.offsets.len() != self.lengths.len() {
            return Err(Error::InvalidConfig(format!(
                "{} offsets for {} lengths",
                self.offsets.len(),
                self.lengths.len()
            )));
        }
        let mut end = 0u64;
        for (i, (&off, &len)) in self.offsets.iter().zip(&self.lengths).enumerate() {
            if off < end {
                return Err(Error::InvalidConfig(format!(
                    "slice {i} at {off} overlaps or precedes the previous slice ending at {end}"
                )));
            }
            end = off + len;
        }
        if end > self.data.len() as u64 {
            return Err(Error::InvalidConfig(format!(
                "slices end at {end}, buffer holds {}",
                self.data.len()
            )));
        }
        Ok(())
    }
}

/// Sends `send.slice(i)` to every rank `i` and returns, ordered by source
/// rank, what every rank addressed to this one. Lengths are exchanged first;
/// the data then moves in pairwise rounds, partner `rank ^ round`, so every
/// rank talks to exactly one peer per round.
pub async fn alltoallv(ep: &Endpoint, send: VarPayload) -> Result<VarPayload> {
    exchange(ep, send, None).await
}

/// Like [`alltoallv`], failing with `LengthMismatch` on every rank if the
/// lengths announced by the senders differ from `expected`.
pub async fn alltoallv_expect(ep: &Endpoint, send: VarPayload, expected: &[u64]) -> Result<VarPayload> {
    exchange(ep, send, Some(expected)).await
}

async fn exchange(ep: &Endpoint, send: VarPayload, expected: Option<&[u64]>) -> Result<VarPayload> {
    let n = ep.size();
    let me = ep.rank();
    send.validate()?;
    if send.n_slices() != n {
        return Err(Error::InvalidConfig(format!(
            "{} slices for {n} ranks",
            send.n_slices()
        )));
    }

    let len_tag = collective_tag(TagKind::ExchangeLengths, 0, 0);
    let sends = (0..n).filter(|&p| p != me).map(|p| {
        ep.send(p, len_tag, Bytes::copy_from_slice(&send.lengths[p].to_le_bytes()))
    });
    let recvs = (0..n).filter(|&p| p != me).map(|p| ep.recv(p, len_tag));
    let (sent, got) = join(try_join_all(sends), try_join_all(recvs)).await;
    sent?;
    let mut recv_lengths = vec![0u64; n];
    for (p, b) in (0..n).filter(|&p| p != me).zip(got?) {
        recv_lengths[p] = decode_u64(&b)?;
    }
    recv_lengths[me] = send.lengths[me];

    if let Some(expected) = expected {
        let local_ok = expected == recv_lengths.as_slice();
        if !all_agree(ep, local_ok).await? {
            return Err(Error::LengthMismatch(if local_ok {
                "another rank received unexpected lengths".into()
            } else {
                format!("rank {me} expected {expected:?}, peers announced {recv_lengths:?}")
            }));
        }
    }

    let offsets = &send.offsets;
    let lengths = &send.lengths;
    let data = Bytes::from(send.data);
    let slice = |p: usize| data.slice(offsets[p] as usize..(offsets[p] + lengths[p]) as usize);
    let mut parts: Vec<Bytes> = vec![Bytes::new(); n];
    parts[me] = slice(me);

    let frag = ep.config().max_segment_bytes.max(1);
    let data_tag = collective_tag(TagKind::ExchangeData, 0, 0);
    for round in 1..n.next_power_of_two() {
        let partner = me ^ round;
        if partner >= n {
            continue;
        }
        let outgoing = slice(partner);
        let send_all = async {
            let mut at = 0;
            while at < outgoing.len() {
                let end = (at + frag).min(outgoing.len());
                ep.send(partner, data_tag, outgoing.slice(at..end)).await?;
                at = end;
            }
            Ok::<_, Error>(())
        };
        let want = recv_lengths[partner] as usize;
        let recv_all = async {
            let mut buf = BytesMut::with_capacity(want);
            while buf.len() < want {
                let piece = ep.recv(partner, data_tag).await?;
                if buf.len() + piece.len() > want {
                    return Err(Error::LengthMismatch(format!(
                        "rank {partner} sent more than the announced {want} bytes"
                    )));
                }
                buf.extend_from_slice(&piece);
            }
            Ok(buf.freeze())
        };
        let (s, r) = join(send_all, recv_all).await;
        s?;
        parts[partner] = r?;
    }

    let mut out = VarPayload {
        data: Vec::with_capacity(recv_lengths.iter().sum::<u64>() as usize),
        lengths: recv_lengths,
        offsets: Vec::with_capacity(n),
    };
    for p in parts {
        out.offsets.push(out.data.len() as u64);
        out.data.extend_from_slice(&p);
    }
    Ok(out)
}

/// Every rank's `value`, indexed by rank.
pub async fn allgather_u64(ep: &Endpoint, value: u64) -> Result<Vec<u64>> {
    let n = ep.size();
    let me = ep.rank();
    let tag = collective_tag(TagKind::Gather, 0, 0);
    let bytes = Bytes::copy_from_slice(&value.to_le_bytes());
    let sends = (0..n).filter(|&p| p != me).map(|p| ep.send(p, tag, bytes.clone()));
    let recvs = (0..n).filter(|&p| p != me).map(|p| ep.recv(p, tag));
    let (sent, got) = join(try_join_all(sends), try_join_all(recvs)).await;
    sent?;
    let mut out = vec![value; n];
    for (p, b) in (0..n).filter(|&p| p != me).zip(got?) {
        out[p] = decode_u64(&b)?;
    }
    Ok(out)
}

/// Logical AND of `ok` over all ranks (gather at rank 0, then broadcast).
async fn all_agree(ep: &Endpoint, ok: bool) -> Result<bool> {
    let n = ep.size();
    let tag = collective_tag(TagKind::Control, 0, 0);
    if n == 1 {
        return Ok(ok);
    }
    if ep.rank() == 0 {
        let votes = try_join_all((1..n).map(|p| ep.recv(p, tag))).await?;
        let all = ok && votes.iter().all(|v| v.first() == Some(&1));
        let verdict = Bytes::from(vec![all as u8]);
        try_join_all((1..n).map(|p| ep.send(p, tag, verdict.clone()))).await?;
        Ok(all)
    } else {
        ep.send(0, tag, Bytes::from(vec![ok as u8])).await?;
        Ok(ep.recv(0, tag).await?.first() == Some(&1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{run_ranks, Backend, SimParams, TransportConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sim() -> Backend {
        Backend::Sim(SimParams::default())
    }

    fn run(backend: &Backend, cfg: &TransportConfig, sends: Vec<VarPayload>) -> Vec<VarPayload> {
        run_ranks(sends.len(), backend, cfg, |ep| {
            let mine = sends[ep.rank()].clone();
            async move { alltoallv(&ep, mine).await }
        })
        .unwrap()
        .results
    }

    #[test]
    fn allgather_collects_by_rank() {
        let r = run_ranks(5, &sim(), &TransportConfig::default(), |ep| async move {
            allgather_u64(&ep, ep.rank() as u64 * 10).await
        })
        .unwrap();
        for got in r.results {
            assert_eq!(got, vec![0, 10, 20, 30, 40]);
        }
    }

    #[test]
    fn two_rank_swap() {
        let sends = vec![
            VarPayload::from_slices(&[&b""[..], b"ab"]),
            VarPayload::from_slices(&[&b"xyz"[..], b""]),
        ];
        let got = run(&sim(), &TransportConfig::default(), sends);
        assert_eq!(got[0].slice(1), b"xyz");
        assert_eq!(got[1].slice(0), b"ab");
        assert_eq!(got[0].total_len(), 3);
    }

    #[test]
    fn all_empty() {
        let sends = vec![VarPayload::from_slices(&[&b""[..]; 4]); 4];
        for got in run(&sim(), &TransportConfig::default(), sends) {
            assert_eq!(got.lengths, vec![0; 4]);
            assert!(got.data.is_empty());
        }
    }

    #[test]
    fn random_matrices_match_transpose_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = TransportConfig {
            max_segment_bytes: 64,
            ..Default::default()
        };
        for (case, n) in [1usize, 2, 3, 4, 5, 7, 8].into_iter().enumerate() {
            let matrix: Vec<Vec<Vec<u8>>> = (0..n)
                .map(|_| {
                    (0..n)
                        .map(|_| {
                            let len = rng.gen_range(0..300);
                            (0..len).map(|_| rng.gen()).collect()
                        })
                        .collect()
                })
                .collect();
            let sends = matrix.iter().map(|row| VarPayload::from_slices(row)).collect();
            let backend = [sim(), Backend::Threads, Backend::Tcp][case % 3].clone();
            let got = run(&backend, &cfg, sends);
            let sent: usize = matrix.iter().flatten().map(Vec::len).sum();
            let received: usize = got.iter().map(|g| g.data.len()).sum();
            assert_eq!(sent, received);
            for (dst, g) in got.iter().enumerate() {
                g.validate().unwrap();
                for src in 0..n {
                    assert_eq!(g.slice(src), &matrix[src][dst][..], "n={n} {src}->{dst}");
                }
            }
        }
    }

    #[test]
    fn oversized_slice_is_rejected_without_data() {
        let p = VarPayload {
            data: Vec::new(),
            lengths: vec![1 << 31],
            offsets: vec![0],
        };
        assert!(matches!(p.validate(), Err(Error::OffsetOverflow(l)) if l == 1 << 31));
        let edge = VarPayload {
            data: Vec::new(),
            lengths: vec![MAX_SLICE_BYTES],
            offsets: vec![0],
        };
        assert!(matches!(edge.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn overlapping_slices_are_rejected() {
        let p = VarPayload {
            data: vec![0; 10],
            lengths: vec![5, 5],
            offsets: vec![0, 3],
        };
        assert!(matches!(p.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn unexpected_lengths_fail_everywhere() {
        let err = run_ranks(3, &sim(), &TransportConfig::default(), |ep| async move {
            let send = VarPayload::from_slices(&[&b"a"[..], b"bb", b"ccc"]);
            let len = send.lengths[ep.rank()];
            let mut expected = vec![len; 3];
            if ep.rank() == 2 {
                expected[0] += 1;
            }
            alltoallv_expect(&ep, send, &expected).await
        })
        .unwrap_err();
        assert!(matches!(err, Error::LengthMismatch(_)));
    }

    #[test]
    fn consistent_expectations_pass() {
        run_ranks(3, &sim(), &TransportConfig::default(), |ep| async move {
            let send = VarPayload::from_slices(&[&b"a"[..], b"bb", b"ccc"]);
            let len = send.lengths[ep.rank()];
            alltoallv_expect(&ep, send, &[len; 3]).await
        })
        .unwrap();
    }
}
