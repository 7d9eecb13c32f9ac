//! Allreduce (multi-color trees, reduce-to-root ring, flat reduce+broadcast)
//! and AllToAllV over the [`Endpoint`] transport.
//!
//! Every allreduce here runs the same pipelined engine over a different
//! spanning tree: parents *pull* child segments, add them to their own in a
//! fixed order, and make the partial sum available to their own parent; the
//! root's final segments are then pulled back down the same tree. Because
//! the fold order is a function of the tree alone, results are bitwise
//! reproducible and can be checked against a serial oracle that folds in
//! the same order.

mod alltoallv;
mod tree;

use std::ops::{Deref, DerefMut, Range};
use std::str::FromStr;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{
    build_multicolor_trees, build_ring, ChunkPlan, ColorTreeSet, RankId, RingOrder,
};
use crate::transport::{Endpoint, Tag};

pub use alltoallv::{allgather_u64, alltoallv, alltoallv_expect, VarPayload, MAX_SLICE_BYTES};
pub use tree::{allreduce_multicolor, allreduce_ring, reduce_then_broadcast};

/// Segments in flight per color and direction.
pub const PIPELINE_DEPTH: usize = 4;
/// Default segment size: 64 Ki floats (256 KiB).
pub const DEFAULT_SEGMENT_ELEMS: usize = 64 * 1024;

/// Model gradient (or weights) as a flat `f32` vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientBuffer {
    data: Vec<f32>,
}

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f32>> for GradientBuffer {
    fn from(data: Vec<f32>) -> Self {
        Self { data }
    }
}

impl Deref for GradientBuffer {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.data
    }
}

impl DerefMut for GradientBuffer {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// `dst[i] += src[i]`. A straight loop the compiler vectorizes.
pub fn elementwise_add(dst: &mut [f32], src: &[f32]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::LengthMismatch(format!(
            "adding {} elements into {}",
            src.len(),
            dst.len()
        )));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
    Ok(())
}

/// Same as [`elementwise_add`] with `src` still in little-endian wire form.
pub(crate) fn add_le_bytes(dst: &mut [f32], src: &[u8]) {
    debug_assert_eq!(src.len(), dst.len() * 4);
    for (d, s) in dst.iter_mut().zip(src.chunks_exact(4)) {
        *d += f32::from_le_bytes([s[0], s[1], s[2], s[3]]);
    }
}

pub(crate) fn copy_le_bytes(dst: &mut [f32], src: &[u8]) {
    debug_assert_eq!(src.len(), dst.len() * 4);
    for (d, s) in dst.iter_mut().zip(src.chunks_exact(4)) {
        *d = f32::from_le_bytes([s[0], s[1], s[2], s[3]]);
    }
}

pub fn f32s_to_bytes(v: &[f32]) -> Bytes {
    let mut out = vec![0u8; v.len() * 4];
    for (o, x) in out.chunks_exact_mut(4).zip(v) {
        o.copy_from_slice(&x.to_le_bytes());
    }
    out.into()
}

pub fn bytes_to_f32s(b: &[u8]) -> Vec<f32> {
    let n = b.len() / 4;
    let mut out = vec![0.0; n];
    copy_le_bytes(&mut out, &b[..n * 4]);
    out
}

/// What a collective tag is used for; occupies bits 26..30 of the tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum TagKind {
    ReduceUp = 1,
    BroadcastDown = 2,
    LengthCheck = 3,
    ExchangeLengths = 4,
    ExchangeData = 5,
    Control = 6,
    Gather = 7,
}

/// Packs `(kind, color, segment)` into a tag. Colors use 8 bits and segment
/// indices wrap at 2^18; exposures under a reused tag are served in order,
/// so wrapping is harmless as long as fewer than 2^18 segments of one color
/// are in flight.
pub fn collective_tag(kind: TagKind, color: usize, segment: usize) -> Tag {
    ((kind as u32) << 26) | (((color & 0xff) as u32) << 18) | ((segment & 0x3ffff) as u32)
}

/// Per-color segmentation of a chunk plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentSchedule {
    pub segment_elems: usize,
    /// `segments[color]` are absolute element ranges covering that chunk.
    pub segments: Vec<Vec<Range<usize>>>,
}

impl SegmentSchedule {
    pub fn new(plan: &ChunkPlan, segment_elems: usize) -> Self {
        let segment_elems = segment_elems.max(1);
        let segments = plan
            .chunks
            .iter()
            .map(|c| {
                (c.start..c.start + c.len)
                    .step_by(segment_elems)
                    .map(|s| s..(s + segment_elems).min(c.start + c.len))
                    .collect()
            })
            .collect();
        Self {
            segment_elems,
            segments,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Multicolor,
    Ring,
    ReduceBcast,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Multicolor, Algorithm::Ring, Algorithm::ReduceBcast];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Multicolor => "multicolor",
            Algorithm::Ring => "ring",
            Algorithm::ReduceBcast => "reduce_bcast",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multicolor" => Ok(Algorithm::Multicolor),
            "ring" => Ok(Algorithm::Ring),
            "reduce_bcast" | "reduce-bcast" => Ok(Algorithm::ReduceBcast),
            other => Err(Error::InvalidConfig(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// An allreduce algorithm bound to its communication structure.
#[derive(Clone, Debug, PartialEq)]
pub enum Allreduce {
    Multicolor(ColorTreeSet),
    Ring(RingOrder),
    ReduceBcast(RankId),
}

impl Allreduce {
    /// Builds the structure for `n_ranks`. Multi-color uses `min(colors,
    /// n_ranks)` colors; on a single rank every variant is the identity.
    pub fn new(algo: Algorithm, n_ranks: usize, colors: usize, arity: usize) -> Result<Self> {
        Ok(match algo {
            Algorithm::Multicolor if n_ranks < 2 => Allreduce::Ring(build_ring(1, 0)?),
            Algorithm::Multicolor => {
                Allreduce::Multicolor(build_multicolor_trees(n_ranks, colors.min(n_ranks), arity)?)
            }
            Algorithm::Ring => Allreduce::Ring(build_ring(n_ranks, 0)?),
            Algorithm::ReduceBcast => Allreduce::ReduceBcast(0),
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            Allreduce::Multicolor(_) => Algorithm::Multicolor,
            Allreduce::Ring(_) => Algorithm::Ring,
            Allreduce::ReduceBcast(_) => Algorithm::ReduceBcast,
        }
    }

    pub async fn run(&self, ep: &Endpoint, buf: &mut [f32], segment_elems: usize) -> Result<()> {
        match self {
            Allreduce::Multicolor(ts) => allreduce_multicolor(ep, buf, ts, segment_elems).await,
            Allreduce::Ring(ring) => allreduce_ring(ep, buf, ring, segment_elems).await,
            Allreduce::ReduceBcast(root) => {
                reduce_then_broadcast(ep, buf, *root, segment_elems).await
            }
        }
    }
}
