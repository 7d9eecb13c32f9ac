//! Segmented all-to-all reshuffle of a group's records.
//!
//! Each rank cuts its shard into `m` contiguous segments by byte position
//! and, segment by segment, sends every record to a uniformly random member
//! of its group with one [`alltoallv`]. Afterwards each rank permutes what it
//! received and rebuilds its index. Segmenting keeps every per-destination
//! slice far below the 2^31-byte limit even for shards larger than 4 GiB.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{batch_rng, IndexEntry, ShardStore, MAX_RECORD_BYTES};
use crate::collectives::{allgather_u64, alltoallv, VarPayload, MAX_SLICE_BYTES};
use crate::error::{Error, Result};
use crate::transport::Endpoint;

/// Aim for segments of about this many bytes.
pub const SEGMENT_TARGET_BYTES: u64 = 1 << 30;
/// Per-record framing on the wire: `u32` length, `u32` label.
const FRAME_HEADER: u64 = 8;
const DEST_DOMAIN: u64 = 0x5348_5546_4c45_0001;
const PERM_DOMAIN: u64 = 0x5348_5546_4c45_0002;

/// `⌈shard_bytes / SEGMENT_TARGET_BYTES⌉`, at least 1.
pub fn default_segments(shard_bytes: u64) -> usize {
    shard_bytes.div_ceil(SEGMENT_TARGET_BYTES).max(1) as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPlan {
    /// Index positions of the records in this segment.
    pub records: Range<usize>,
    /// Destination (rank in group) of each record in `records`.
    pub dest: Vec<usize>,
    /// Framed bytes this segment sends to each destination.
    pub slice_bytes: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShufflePlan {
    pub segments: Vec<SegmentPlan>,
}

impl ShufflePlan {
    pub fn max_slice_bytes(&self) -> u64 {
        self.segments
            .iter()
            .flat_map(|s| s.slice_bytes.iter().copied())
            .max()
            .unwrap_or(0)
    }
}

/// What one rank sends in each segment. Pure: depends only on the index,
/// so it can be checked on synthetic indices with huge offsets.
pub fn plan_shuffle(
    index: &[IndexEntry],
    group_size: usize,
    m_segments: usize,
    seed: u64,
    rank_in_group: usize,
) -> Result<ShufflePlan> {
    if group_size == 0 || m_segments == 0 {
        return Err(Error::InvalidConfig(format!(
            "shuffle needs group_size >= 1 and segments >= 1, got {group_size} and {m_segments}"
        )));
    }
    if let Some(e) = index.iter().find(|e| e.length as u64 >= MAX_RECORD_BYTES) {
        return Err(Error::SegmentOverflow(e.length as u64));
    }
    let bounds = segment_bounds(index, m_segments);
    let mut rng = batch_rng(seed ^ DEST_DOMAIN, rank_in_group as u64);
    let mut segments = Vec::with_capacity(m_segments);
    for records in bounds {
        let mut slice_bytes = vec![0u64; group_size];
        let dest: Vec<usize> = index[records.clone()]
            .iter()
            .map(|e| {
                let d = rng.gen_range(0..group_size);
                slice_bytes[d] += FRAME_HEADER + e.length as u64;
                d
            })
            .collect();
        if let Some(&big) = slice_bytes.iter().find(|&&b| b > MAX_SLICE_BYTES) {
            return Err(Error::SegmentOverflow(big));
        }
        segments.push(SegmentPlan {
            records,
            dest,
            slice_bytes,
        });
    }
    Ok(ShufflePlan { segments })
}

/// Splits the shard into `m` runs of records by where each record starts
/// within the shard's byte span.
fn segment_bounds(index: &[IndexEntry], m: usize) -> Vec<Range<usize>> {
    let (Some(first), Some(last)) = (index.first(), index.last()) else {
        return vec![0..0; m];
    };
    let base = first.offset;
    let span = (last.end() - base).max(1) as u128;
    let segment_of = |e: &IndexEntry| {
        (((e.offset - base) as u128 * m as u128 / span) as usize).min(m - 1)
    };
    let mut bounds = Vec::with_capacity(m);
    let mut start = 0;
    for s in 0..m {
        let end = start + index[start..].partition_point(|e| segment_of(e) <= s);
        bounds.push(start..end);
        start = end;
    }
    bounds
}

/// Reshuffles records among all ranks of `ep`, which must form exactly one
/// group. `m_segments == 0` picks [`default_segments`] of the largest shard.
pub async fn shuffle_all(
    ep: &Endpoint,
    store: ShardStore,
    m_segments: usize,
    seed: u64,
) -> Result<ShardStore> {
    if store.group_size != ep.size() || store.rank_in_group != ep.rank() {
        return Err(Error::GroupMismatch {
            group_size: store.group_size,
            n_ranks: ep.size(),
        });
    }
    shuffle_within(ep, store, m_segments, seed).await
}

/// Reshuffles records only among the members of this rank's group
/// (consecutive ranks `group_id * group_size ..`).
pub async fn shuffle_group(
    ep: &Endpoint,
    store: ShardStore,
    m_segments: usize,
    seed: u64,
) -> Result<ShardStore> {
    let s = store.group_size;
    if s == 0 || ep.size() % s != 0 || store.group_id * s + store.rank_in_group != ep.rank() {
        return Err(Error::GroupMismatch {
            group_size: s,
            n_ranks: ep.size(),
        });
    }
    let members: Vec<usize> = (store.group_id * s..(store.group_id + 1) * s).collect();
    let sub = ep.subgroup(&members)?;
    shuffle_within(&sub, store, m_segments, seed).await
}

async fn shuffle_within(
    ep: &Endpoint,
    store: ShardStore,
    m_segments: usize,
    seed: u64,
) -> Result<ShardStore> {
    let s = ep.size();
    let m = if m_segments == 0 {
        let sizes = allgather_u64(ep, store.bytes()).await?;
        default_segments(sizes.into_iter().max().unwrap_or(0))
    } else {
        m_segments
    };
    let plan = plan_shuffle(&store.index, s, m, seed, store.rank_in_group)?;

    let mut blob = Vec::new();
    let mut index = Vec::new();
    for seg in &plan.segments {
        let mut offsets = Vec::with_capacity(s);
        let mut total = 0u64;
        for &b in &seg.slice_bytes {
            offsets.push(total);
            total += b;
        }
        let mut data = vec![0u8; total as usize];
        let mut cursor: Vec<usize> = offsets.iter().map(|&o| o as usize).collect();
        for (e, &d) in store.index[seg.records.clone()].iter().zip(&seg.dest) {
            let at = cursor[d];
            let len = e.length as usize;
            data[at..at + 4].copy_from_slice(&e.length.to_le_bytes());
            data[at + 4..at + 8].copy_from_slice(&e.label.to_le_bytes());
            data[at + 8..at + 8 + len]
                .copy_from_slice(&store.blob[e.offset as usize..e.end() as usize]);
            cursor[d] = at + 8 + len;
        }
        let send = VarPayload {
            data,
            lengths: seg.slice_bytes.clone(),
            offsets,
        };
        let got = alltoallv(ep, send).await?;
        unframe(&got.data, &mut blob, &mut index)?;
    }

    let mut order: Vec<usize> = (0..index.len()).collect();
    let stream = ((store.group_id as u64) << 32) | store.rank_in_group as u64;
    order.shuffle(&mut batch_rng(seed ^ PERM_DOMAIN, stream));
    let permuted = order.iter().map(|&i| {
        let e: &IndexEntry = &index[i];
        (&blob[e.offset as usize..e.end() as usize], e.label)
    });
    Ok(ShardStore::from_slices(
        permuted,
        store.group_id,
        store.group_size,
        store.rank_in_group,
    ))
}

fn unframe(mut data: &[u8], blob: &mut Vec<u8>, index: &mut Vec<IndexEntry>) -> Result<()> {
    while !data.is_empty() {
        if data.len() < FRAME_HEADER as usize {
            return Err(Error::FormatError("truncated record frame".into()));
        }
        let len = u32::from_le_bytes(data[0..4].try_into().expect("4 bytes"));
        let label = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes"));
        let body = data
            .get(8..8 + len as usize)
            .ok_or_else(|| Error::FormatError("truncated record body".into()))?;
        index.push(IndexEntry {
            offset: blob.len() as u64,
            length: len,
            label,
        });
        blob.extend_from_slice(body);
        data = &data[8 + len as usize..];
    }
    Ok(())
}
