//! In-memory dataset store: a raw blob of concatenated records plus an index
//! of `(offset, length, label)` entries, partitioned across ranks and
//! reshuffled between them with [`shuffle_all`] / [`shuffle_group`].
//!
//! Index file layout (little-endian):
//!
//! ```text
//! "DIMD"  u32 version = 1  u64 count  count × (u64 offset, u32 length, u32 label)
//! ```

mod corpus;
mod shuffle;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::topology::RankId;

pub use corpus::{decode_features, encode_features, synthetic_corpus, uniform_records, FEATURES, CLASSES};
pub use shuffle::{
    default_segments, plan_shuffle, shuffle_all, shuffle_group, SegmentPlan, ShufflePlan,
    SEGMENT_TARGET_BYTES,
};

pub const INDEX_MAGIC: [u8; 4] = *b"DIMD";
pub const INDEX_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const ENTRY_LEN: usize = 16;
/// Records must be shorter than this.
pub const MAX_RECORD_BYTES: u64 = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct IndexEntry {
    pub offset: u64,
    pub length: u32,
    pub label: u32,
}

impl IndexEntry {
    pub fn end(&self) -> u64 {
        self.offset + self.length as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Record {
    pub bytes: Vec<u8>,
    pub label: u32,
}

impl Record {
    pub fn new(bytes: impl Into<Vec<u8>>, label: u32) -> Self {
        Self {
            bytes: bytes.into(),
            label,
        }
    }
}

/// Concatenates `records` into a blob and encodes the matching index file.
pub fn build_blob(records: &[Record]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut blob = Vec::with_capacity(records.iter().map(|r| r.bytes.len()).sum());
    let mut index = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.bytes.len() as u64 >= MAX_RECORD_BYTES {
            return Err(Error::RecordTooLarge(r.bytes.len() as u64));
        }
        if r.bytes.is_empty() {
            return Err(Error::InvalidConfig(format!("record {i} is empty")));
        }
        index.push(IndexEntry {
            offset: blob.len() as u64,
            length: r.bytes.len() as u32,
            label: r.label,
        });
        blob.extend_from_slice(&r.bytes);
    }
    Ok((blob, encode_index(&index)))
}

pub fn encode_index(entries: &[IndexEntry]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + entries.len() * ENTRY_LEN);
    out.extend_from_slice(&INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&e.offset.to_le_bytes());
        out.extend_from_slice(&e.length.to_le_bytes());
        out.extend_from_slice(&e.label.to_le_bytes());
    }
    out
}

/// Parses an index file and checks that entries are non-empty, sorted and
/// disjoint.
pub fn decode_index(bytes: &[u8]) -> Result<Vec<IndexEntry>> {
    let bad = |msg: String| Error::FormatError(msg);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("index is {} bytes, shorter than its header", bytes.len())));
    }
    if bytes[..4] != INDEX_MAGIC {
        return Err(bad("missing DIMD magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != INDEX_VERSION {
        return Err(bad(format!("unsupported index version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if (body.len() as u64) != count.saturating_mul(ENTRY_LEN as u64) {
        return Err(bad(format!(
            "index declares {count} entries but holds {} bytes of entries",
            body.len()
        )));
    }
    let entries: Vec<IndexEntry> = body
        .chunks_exact(ENTRY_LEN)
        .map(|c| IndexEntry {
            offset: u64::from_le_bytes(c[0..8].try_into().expect("8 bytes")),
            length: u32::from_le_bytes(c[8..12].try_into().expect("4 bytes")),
            label: u32::from_le_bytes(c[12..16].try_into().expect("4 bytes")),
        })
        .collect();
    check_entries(&entries, None)?;
    Ok(entries)
}

fn check_entries(entries: &[IndexEntry], blob_len: Option<u64>) -> Result<()> {
    let mut end = 0u64;
    for (i, e) in entries.iter().enumerate() {
        if e.length == 0 {
            return Err(Error::FormatError(format!("entry {i} has length 0")));
        }
        if e.length as u64 >= MAX_RECORD_BYTES {
            return Err(Error::FormatError(format!("entry {i} is {} bytes", e.length)));
        }
        if e.offset < end {
            return Err(Error::FormatError(format!(
                "entry {i} at {} overlaps or precedes the previous entry ending at {end}",
                e.offset
            )));
        }
        end = e.end();
    }
    if let Some(len) = blob_len {
        if end > len {
            return Err(Error::FormatError(format!(
                "index reaches byte {end}, blob holds {len}"
            )));
        }
    }
    Ok(())
}

/// Writes `records` as a blob file and an index file.
pub fn write_dataset(blob_path: &Path, index_path: &Path, records: &[Record]) -> Result<()> {
    let (blob, index) = build_blob(records)?;
    fs::write(blob_path, blob)?;
    fs::write(index_path, index)?;
    Ok(())
}

/// Reads every record of a dataset in index order.
pub fn read_dataset(blob_path: &Path, index_path: &Path) -> Result<Vec<Record>> {
    let store = load_partition(blob_path, index_path, 0, 1, 1)?;
    Ok(store.records().collect())
}

/// Summary of a validated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSummary {
    pub records: usize,
    pub blob_bytes: u64,
    /// Bytes of the blob not covered by any record.
    pub gap_bytes: u64,
    pub label_counts: BTreeMap<u32, usize>,
}

/// Validates an index against its blob.
pub fn verify_dataset(blob_path: &Path, index_path: &Path) -> Result<DatasetSummary> {
    let index = decode_index(&fs::read(index_path)?)?;
    let blob_bytes = fs::metadata(blob_path)?.len();
    check_entries(&index, Some(blob_bytes))?;
    let used: u64 = index.iter().map(|e| e.length as u64).sum();
    let mut label_counts = BTreeMap::new();
    for e in &index {
        *label_counts.entry(e.label).or_insert(0) += 1;
    }
    Ok(DatasetSummary {
        records: index.len(),
        blob_bytes,
        gap_bytes: blob_bytes - used,
        label_counts,
    })
}

/// One rank's resident records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShardStore {
    pub blob: Vec<u8>,
    pub index: Vec<IndexEntry>,
    pub group_id: usize,
    pub group_size: usize,
    pub rank_in_group: usize,
}

impl ShardStore {
    pub fn from_records(records: &[Record], group_id: usize, group_size: usize, rank_in_group: usize) -> Self {
        Self::from_slices(
            records.iter().map(|r| (&r.bytes[..], r.label)),
            group_id,
            group_size,
            rank_in_group,
        )
    }

    /// Packs `(bytes, label)` pairs into a fresh shard.
    pub fn from_slices<'a>(
        records: impl IntoIterator<Item = (&'a [u8], u32)>,
        group_id: usize,
        group_size: usize,
        rank_in_group: usize,
    ) -> Self {
        let mut store = ShardStore {
            group_id,
            group_size,
            rank_in_group,
            ..Default::default()
        };
        for (bytes, label) in records {
            store.push(bytes, label);
        }
        store
    }

    fn push(&mut self, bytes: &[u8], label: u32) {
        self.index.push(IndexEntry {
            offset: self.blob.len() as u64,
            length: bytes.len() as u32,
            label,
        });
        self.blob.extend_from_slice(bytes);
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.index.iter().map(|e| e.length as u64).sum()
    }

    pub fn get(&self, i: usize) -> (&[u8], u32) {
        let e = &self.index[i];
        (&self.blob[e.offset as usize..e.end() as usize], e.label)
    }

    pub fn record(&self, i: usize) -> Record {
        let (b, l) = self.get(i);
        Record::new(b, l)
    }

    pub fn records(&self) -> impl Iterator<Item = Record> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    pub fn check(&self) -> Result<()> {
        if self.rank_in_group >= self.group_size.max(1) {
            return Err(Error::FormatError(format!(
                "rank_in_group {} >= group_size {}",
                self.rank_in_group, self.group_size
            )));
        }
        check_entries(&self.index, Some(self.blob.len() as u64))
    }

    /// Indices of a uniform with-replacement sample, reproducible from
    /// `(req.rng_seed, req.step)`.
    pub fn sample_indices(&self, req: &BatchRequest) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::EmptyShard);
        }
        let mut rng = batch_rng(req.rng_seed, req.step);
        Ok((0..req.batch_size).map(|_| rng.gen_range(0..self.len())).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchRequest {
    pub batch_size: usize,
    pub rng_seed: u64,
    pub step: u64,
}

/// Counter-style generator: `seed` picks the key, `step` the stream.
pub(crate) fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Group `rank / group_size`; within it, record `i` goes to rank
/// `i % group_size`.
pub fn load_partition(
    blob_path: &Path,
    index_path: &Path,
    rank: RankId,
    n_ranks: usize,
    group_size: usize,
) -> Result<ShardStore> {
    let index = decode_index(&fs::read(index_path)?)?;
    let blob = fs::read(blob_path)?;
    partition(&blob, &index, rank, n_ranks, group_size)
}

/// [`load_partition`] over an in-memory dataset.
pub fn partition(
    blob: &[u8],
    index: &[IndexEntry],
    rank: RankId,
    n_ranks: usize,
    group_size: usize,
) -> Result<ShardStore> {
    if group_size == 0 || n_ranks % group_size != 0 {
        return Err(Error::GroupMismatch {
            group_size,
            n_ranks,
        });
    }
    if rank >= n_ranks {
        return Err(Error::InvalidConfig(format!("rank {rank} out of range for {n_ranks}")));
    }
    check_entries(index, Some(blob.len() as u64))?;
    let rank_in_group = rank % group_size;
    let mine = index
        .iter()
        .skip(rank_in_group)
        .step_by(group_size)
        .map(|e| (&blob[e.offset as usize..e.end() as usize], e.label));
    Ok(ShardStore::from_slices(mine, rank / group_size, group_size, rank_in_group))
}

/// Draws `req.batch_size` records uniformly with replacement.
pub fn random_batch(store: &ShardStore, req: &BatchRequest) -> Result<Vec<Record>> {
    Ok(store
        .sample_indices(req)?
        .into_iter()
        .map(|i| store.record(i))
        .collect())
}
