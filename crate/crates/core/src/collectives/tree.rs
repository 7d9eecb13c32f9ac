//! Pipelined pull-based reduce + broadcast over one or more spanning trees.

use std::cell::RefCell;
use std::ops::Range;

use bytes::Bytes;
use futures::future::{try_join, try_join_all};
use futures::stream::{self, StreamExt, TryStreamExt};

use super::{
    add_le_bytes, collective_tag, copy_le_bytes, f32s_to_bytes, SegmentSchedule, TagKind,
    PIPELINE_DEPTH,
};
use crate::error::{Error, Result};
use crate::topology::{make_chunk_plan, ColorTree, ColorTreeSet, RankId, RingOrder};
use crate::transport::Endpoint;

/// Where a rank's own contribution sits among its children's when folding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FoldOrder {
    /// `local + child[0] + child[1] + ...`
    LocalFirst,
    /// Operands sorted by rank.
    Ascending,
}

/// One tree reducing one contiguous range of the buffer.
struct Lane<'a> {
    color: usize,
    tree: &'a ColorTree,
    segments: Vec<Range<usize>>,
    order: FoldOrder,
}

/// Sums `buf` across all ranks with `k` pipelined reductions, one per color
/// tree of `ts`, each over its own chunk of the buffer.
pub async fn allreduce_multicolor(
    ep: &Endpoint,
    buf: &mut [f32],
    ts: &ColorTreeSet,
    segment_elems: usize,
) -> Result<()> {
    if ep.size() == 1 {
        return Ok(());
    }
    if ts.n_ranks != ep.size() {
        return Err(Error::InvalidConfig(format!(
            "tree set built for {} ranks used on {}",
            ts.n_ranks,
            ep.size()
        )));
    }
    check_lengths(ep, buf.len()).await?;
    let sched = SegmentSchedule::new(&make_chunk_plan(buf.len(), ts.k), fit_segment(ep, segment_elems));
    let lanes = ts
        .trees
        .iter()
        .zip(sched.segments)
        .map(|(tree, segments)| Lane {
            color: tree.color,
            tree,
            segments,
            order: FoldOrder::LocalFirst,
        })
        .collect();
    run_lanes(ep, buf, lanes).await
}

/// Reduce-to-root along `ring.order` (each hop adds its contribution), then
/// broadcast back in the opposite direction.
pub async fn allreduce_ring(
    ep: &Endpoint,
    buf: &mut [f32],
    ring: &RingOrder,
    segment_elems: usize,
) -> Result<()> {
    if ep.size() == 1 {
        return Ok(());
    }
    if ring.order.len() != ep.size() {
        return Err(Error::InvalidConfig(format!(
            "ring over {} ranks used on {}",
            ring.order.len(),
            ep.size()
        )));
    }
    check_lengths(ep, buf.len()).await?;
    let tree = ring.as_tree();
    single_lane(ep, buf, &tree, segment_elems, FoldOrder::LocalFirst).await
}

/// Flat baseline: `root` pulls every buffer, sums in ascending rank order and
/// sends the result back to everyone.
pub async fn reduce_then_broadcast(
    ep: &Endpoint,
    buf: &mut [f32],
    root: RankId,
    segment_elems: usize,
) -> Result<()> {
    if root >= ep.size() {
        return Err(Error::InvalidConfig(format!(
            "root {root} out of range for {} ranks",
            ep.size()
        )));
    }
    if ep.size() == 1 {
        return Ok(());
    }
    check_lengths(ep, buf.len()).await?;
    let tree = ColorTree::star(ep.size(), root);
    single_lane(ep, buf, &tree, segment_elems, FoldOrder::Ascending).await
}

/// Caps a requested segment at what one transport message can carry.
fn fit_segment(ep: &Endpoint, segment_elems: usize) -> usize {
    segment_elems.min(ep.config().max_segment_bytes / 4).max(1)
}

async fn single_lane(
    ep: &Endpoint,
    buf: &mut [f32],
    tree: &ColorTree,
    segment_elems: usize,
    order: FoldOrder,
) -> Result<()> {
    let sched = SegmentSchedule::new(&make_chunk_plan(buf.len(), 1), fit_segment(ep, segment_elems));
    let lane = Lane {
        color: 0,
        tree,
        segments: sched.segments.into_iter().next().unwrap_or_default(),
        order,
    };
    run_lanes(ep, buf, vec![lane]).await
}

async fn run_lanes(ep: &Endpoint, buf: &mut [f32], lanes: Vec<Lane<'_>>) -> Result<()> {
    debug_assert!(
        buf.iter().all(|x| x.is_finite()),
        "non-finite value entering allreduce"
    );
    let cell = RefCell::new(buf);
    try_join_all(lanes.iter().map(|lane| run_lane(ep, &cell, lane))).await?;
    Ok(())
}

async fn run_lane(ep: &Endpoint, cell: &RefCell<&mut [f32]>, lane: &Lane<'_>) -> Result<()> {
    let me = ep.rank();
    let up = stream::iter(lane.segments.iter().enumerate())
        .map(|(j, r)| reduce_segment(ep, cell, lane, j, r.clone()))
        .buffer_unordered(PIPELINE_DEPTH)
        .try_collect::<()>();
    let down = async {
        match lane.tree.parent[me] {
            None => Ok(()),
            Some(parent) => {
                stream::iter(lane.segments.iter().enumerate())
                    .map(|(j, r)| broadcast_segment(ep, cell, lane, parent, j, r.clone()))
                    .buffer_unordered(PIPELINE_DEPTH)
                    .try_collect::<()>()
                    .await
            }
        }
    };
    try_join(up, down).await?;
    Ok(())
}

/// Pulls every child's partial sum for segment `j`, folds in the local
/// contribution and either offers the result to the parent or, at the root,
/// stores it and offers it to the children.
async fn reduce_segment(
    ep: &Endpoint,
    cell: &RefCell<&mut [f32]>,
    lane: &Lane<'_>,
    j: usize,
    r: Range<usize>,
) -> Result<()> {
    let me = ep.rank();
    let children = &lane.tree.children[me];
    let up_tag = collective_tag(TagKind::ReduceUp, lane.color, j);
    let down_tag = collective_tag(TagKind::BroadcastDown, lane.color, j);
    let nbytes = r.len() * 4;

    let pulled: Vec<Bytes> =
        try_join_all(children.iter().map(|&c| ep.pull(c, up_tag, nbytes))).await?;

    let partial = if pulled.is_empty() {
        f32s_to_bytes(&cell.borrow()[r.clone()])
    } else {
        let mut acc = vec![0.0f32; r.len()];
        let mut operands: Vec<(RankId, Option<&Bytes>)> = Vec::with_capacity(pulled.len() + 1);
        operands.push((me, None));
        operands.extend(children.iter().copied().zip(pulled.iter().map(Some)));
        if lane.order == FoldOrder::Ascending {
            operands.sort_by_key(|(rank, _)| *rank);
        }
        for (i, (_, src)) in operands.iter().enumerate() {
            match (i, src) {
                (0, None) => acc.copy_from_slice(&cell.borrow()[r.clone()]),
                (0, Some(b)) => copy_le_bytes(&mut acc, b),
                (_, None) => {
                    let local = cell.borrow();
                    for (a, x) in acc.iter_mut().zip(&local[r.clone()]) {
                        *a += *x;
                    }
                }
                (_, Some(b)) => add_le_bytes(&mut acc, b),
            }
        }
        if lane.tree.parent[me].is_none() {
            cell.borrow_mut()[r.clone()].copy_from_slice(&acc);
        }
        f32s_to_bytes(&acc)
    };

    match lane.tree.parent[me] {
        Some(_) => ep.serve(up_tag, partial, 1).await,
        None => ep.serve(down_tag, partial, children.len()).await,
    }
}

/// Pulls the reduced segment `j` from the parent, stores it and relays it to
/// the children.
async fn broadcast_segment(
    ep: &Endpoint,
    cell: &RefCell<&mut [f32]>,
    lane: &Lane<'_>,
    parent: RankId,
    j: usize,
    r: Range<usize>,
) -> Result<()> {
    let tag = collective_tag(TagKind::BroadcastDown, lane.color, j);
    let bytes = ep.pull(parent, tag, r.len() * 4).await?;
    copy_le_bytes(&mut cell.borrow_mut()[r], &bytes);
    let children = lane.tree.children[ep.rank()].len();
    if children > 0 {
        ep.serve(tag, bytes, children).await?;
    }
    Ok(())
}

/// Confirms every rank passes the same buffer length. Rank 0 gathers the
/// lengths and answers with a verdict, so all ranks fail together.
pub(crate) async fn check_lengths(ep: &Endpoint, len: usize) -> Result<()> {
    let n = ep.size();
    if n == 1 {
        return Ok(());
    }
    let tag = collective_tag(TagKind::LengthCheck, 0, 0);
    let verdict = if ep.rank() == 0 {
        let lens = try_join_all((1..n).map(|src| ep.recv(src, tag))).await?;
        let mut verdict = Vec::new();
        for (src, b) in (1..n).zip(&lens) {
            let theirs = decode_u64(b)?;
            if theirs != len as u64 {
                verdict = format!("rank {src} has {theirs} elements, rank 0 has {len}").into_bytes();
                break;
            }
        }
        let verdict = Bytes::from(verdict);
        try_join_all((1..n).map(|dst| ep.send(dst, tag, verdict.clone()))).await?;
        verdict
    } else {
        ep.send(0, tag, Bytes::copy_from_slice(&(len as u64).to_le_bytes()))
            .await?;
        ep.recv(0, tag).await?
    };
    if verdict.is_empty() {
        Ok(())
    } else {
        Err(Error::LengthMismatch(String::from_utf8_lossy(&verdict).into_owned()))
    }
}

pub(crate) fn decode_u64(b: &[u8]) -> Result<u64> {
    let arr: [u8; 8] = b
        .try_into()
        .map_err(|_| Error::LengthMismatch(format!("expected an 8-byte header, got {}", b.len())))?;
    Ok(u64::from_le_bytes(arr))
}
