//! Benchmark drivers producing CSV rows.
//!
//! Allreduce throughput follows the bus-bandwidth convention:
//! `2 * payload * (n - 1) / n / time`, the bytes each rank must move in an
//! optimal allreduce, so numbers are comparable across rank counts.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::collectives::{Algorithm, Allreduce, DEFAULT_SEGMENT_ELEMS};
use crate::dimd::{self, build_blob, decode_index, synthetic_corpus, uniform_records};
use crate::error::{Error, Result};
use crate::sgd::{run_training, SamplingMode, TrainConfig, N_PARAMS};
use crate::topology::{ColorTreeSet, DEFAULT_ARITY, DEFAULT_COLORS};
use crate::transport::{run_ranks, Backend, SimParams, TransportConfig};

pub const CSV_HEADER: &str =
    "scenario,algorithm,n_ranks,payload_bytes,median_time_s,throughput_GBps,backend";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Allreduce,
    Shuffle,
    Train,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Allreduce => "allreduce",
            Scenario::Shuffle => "shuffle",
            Scenario::Train => "train",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: String,
    pub algorithm: String,
    pub n_ranks: usize,
    pub payload_bytes: u64,
    pub median_time_s: f64,
    #[serde(rename = "throughput_GBps")]
    pub throughput_gbps: f64,
    pub backend: String,
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub algorithms: Vec<Algorithm>,
    /// Rank counts to sweep.
    pub n_ranks: Vec<usize>,
    pub colors: usize,
    pub arity: usize,
    /// Allreduce payloads; for shuffle, the total corpus size; for train,
    /// the allreduced buffer size (the model is padded up to it).
    pub payloads: Vec<u64>,
    pub backend: Backend,
    pub transport: TransportConfig,
    pub repetitions: usize,
    pub seed: u64,
    pub segment_elems: usize,
    /// Shuffle: group counts to sweep.
    pub groups: Vec<usize>,
    /// Shuffle: segments per shuffle, 0 for the default.
    pub segments: usize,
    /// Shuffle: bytes per synthetic record.
    pub record_bytes: usize,
    /// Train: base configuration; rank count, algorithm and padding are
    /// overridden per run.
    pub train: TrainConfig,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            algorithms: Algorithm::ALL.to_vec(),
            n_ranks: vec![16],
            colors: DEFAULT_COLORS,
            arity: DEFAULT_ARITY,
            payloads: default_payload_sweep(),
            backend: Backend::Sim(SimParams::default()),
            transport: TransportConfig::default(),
            repetitions: 3,
            seed: 0,
            segment_elems: DEFAULT_SEGMENT_ELEMS,
            groups: vec![1],
            segments: 0,
            record_bytes: 1024,
            train: default_train_config(),
        }
    }
}

/// 4 KiB to 256 MiB in powers of 4.
pub fn default_payload_sweep() -> Vec<u64> {
    (0..8).map(|i| 4096u64 << (2 * i)).collect()
}

/// Communication-heavy training setup for benchmarks.
pub fn default_train_config() -> TrainConfig {
    TrainConfig {
        workers_per_node: 2,
        per_worker_batch: 16,
        epochs: 3,
        steps_per_epoch: None,
        base_lr: 0.5,
        warmup_epochs: 0.0,
        shuffle_every: 1,
        compute_s_per_sample: 20e-6,
        ..TrainConfig::default()
    }
}

impl BenchSpec {
    fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(Error::InvalidConfig(format!(
                "timing needs at least 3 repetitions, got {}",
                self.repetitions
            )));
        }
        if self.n_ranks.is_empty() || self.n_ranks.contains(&0) {
            return Err(Error::InvalidConfig("rank sweep must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Rows plus the configurations that failed (and were left out).
#[derive(Clone, Debug, Default)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub failures: Vec<String>,
    /// Train only: `(algorithm, n_ranks, efficiency)` relative to the
    /// smallest rank count of the sweep.
    pub scaling: Vec<(Algorithm, usize, f64)>,
}

impl BenchOutcome {
    fn fail(&mut self, what: String, err: &Error) {
        warn!("{what}: {err}");
        self.failures.push(format!("{what}: {err}"));
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => 0.0,
        _ if n % 2 == 1 => values[n / 2],
        _ => (values[n / 2 - 1] + values[n / 2]) / 2.0,
    }
}

/// Bytes each rank moves in an optimal allreduce, per second, in GB/s.
pub fn bus_bandwidth_gbps(payload_bytes: u64, n_ranks: usize, time_s: f64) -> f64 {
    if n_ranks < 2 || time_s <= 0.0 || payload_bytes == 0 {
        return 0.0;
    }
    2.0 * payload_bytes as f64 * (n_ranks - 1) as f64 / n_ranks as f64 / time_s / 1e9
}

/// Rank `r` contributes `(r + i) % 7` at element `i`: small integers, so
/// the sum is exact in `f32` for any order.
const PERIOD: usize = 7;
/// Whole periods per tile, so fills and checks run as slice copies.
const TILE: usize = PERIOD * 1024;

fn tile(f: impl Fn(usize) -> f32) -> Vec<f32> {
    (0..TILE).map(|i| f(i % PERIOD)).collect()
}

fn fill_tiled(tile: &[f32], len: usize) -> Vec<f32> {
    let mut buf = vec![0.0f32; len];
    for c in buf.chunks_mut(TILE) {
        c.copy_from_slice(&tile[..c.len()]);
    }
    buf
}

/// Runs one allreduce on fresh data, verifies every element on every rank
/// and returns the slowest rank's time inside the collective.
pub fn timed_allreduce(
    ar: &Allreduce,
    n: usize,
    len: usize,
    spec: &BenchSpec,
) -> Result<f64> {
    let expected = tile(|j| (0..n).map(|r| ((r + j) % PERIOD) as f32).sum());
    let expected = &expected;
    let report = run_ranks(n, &spec.backend, &spec.transport, |ep| async move {
        let r = ep.rank();
        let mut buf = fill_tiled(&tile(|j| ((r + j) % PERIOD) as f32), len);
        let start = ep.now();
        ar.run(&ep, &mut buf, spec.segment_elems).await?;
        let t = ep.now() - start;
        if let Some(c) = buf.chunks(TILE).position(|c| c != &expected[..c.len()]) {
            let i = (c * TILE..len).find(|&i| buf[i] != expected[i % TILE]).unwrap_or(c * TILE);
            return Err(Error::Verification(format!(
                "{} on {n} ranks: rank {r} element {i} is {}, expected {}",
                ar.algorithm(),
                buf[i],
                expected[i % TILE]
            )));
        }
        Ok(t)
    })?;
    Ok(report.results.into_iter().fold(0.0, f64::max))
}

pub fn bench_allreduce(spec: &BenchSpec) -> Result<BenchOutcome> {
    spec.validate()?;
    let mut out = BenchOutcome::default();
    for &n in &spec.n_ranks {
        for &algo in &spec.algorithms {
            let ar = match Allreduce::new(algo, n, spec.colors, spec.arity) {
                Ok(ar) => ar,
                Err(e) => {
                    out.fail(format!("{algo} on {n} ranks"), &e);
                    continue;
                }
            };
            for &payload in &spec.payloads {
                let len = (payload / 4) as usize;
                let mut times = Vec::with_capacity(spec.repetitions);
                let mut failed = None;
                for _ in 0..spec.repetitions {
                    match timed_allreduce(&ar, n, len, spec) {
                        Ok(t) => times.push(t),
                        Err(e) => {
                            failed = Some(e);
                            break;
                        }
                    }
                }
                if let Some(e) = failed {
                    out.fail(format!("{algo} on {n} ranks, {payload} bytes"), &e);
                    continue;
                }
                let t = median(&mut times);
                info!("allreduce {algo} n={n} bytes={payload}: {t:.6e} s");
                out.rows.push(BenchRow {
                    scenario: Scenario::Allreduce.name().into(),
                    algorithm: algo.name().into(),
                    n_ranks: n,
                    payload_bytes: len as u64 * 4,
                    median_time_s: t,
                    throughput_gbps: bus_bandwidth_gbps(len as u64 * 4, n, t),
                    backend: spec.backend.name().into(),
                });
            }
        }
    }
    Ok(out)
}

fn record_hash(bytes: &[u8], label: u32) -> u64 {
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    label.hash(&mut h);
    h.finish()
}

/// Order-independent fingerprint of a shard: record count and the
/// wrapping sum of record hashes.
pub fn shard_fingerprint(store: &dimd::ShardStore) -> (usize, u64) {
    let sum = (0..store.len())
        .map(|i| {
            let (b, l) = store.get(i);
            record_hash(b, l)
        })
        .fold(0u64, u64::wrapping_add);
    (store.len(), sum)
}

/// One group shuffle of a corpus of `corpus_bytes` over `n` ranks in
/// `groups` groups. Returns the slowest rank's shuffle time and the mean
/// shard bytes per rank, after checking each group kept its records.
pub fn timed_shuffle(
    n: usize,
    groups: usize,
    corpus_bytes: u64,
    spec: &BenchSpec,
    seed: u64,
) -> Result<(f64, u64)> {
    if groups == 0 || n % groups != 0 {
        return Err(Error::GroupMismatch {
            group_size: if groups == 0 { 0 } else { n / groups },
            n_ranks: n,
        });
    }
    let group_size = n / groups;
    let record = spec.record_bytes.max(1);
    let count = (corpus_bytes as usize / record).max(1);
    let (blob, index) = build_blob(&uniform_records(count, record, spec.seed))?;
    let index = decode_index(&index)?;
    let report = run_ranks(n, &spec.backend, &spec.transport, |ep| {
        let (blob, index) = (&blob, &index);
        async move {
            let store = dimd::partition(blob, index, ep.rank(), n, group_size)?;
            let before = shard_fingerprint(&store);
            let bytes = store.bytes();
            let start = ep.now();
            let store = dimd::shuffle_group(&ep, store, spec.segments, seed).await?;
            let t = ep.now() - start;
            Ok((t, bytes, before, shard_fingerprint(&store)))
        }
    })?;
    for g in 0..groups {
        let members = &report.results[g * group_size..(g + 1) * group_size];
        let sum = |pick: fn(&(f64, u64, (usize, u64), (usize, u64))) -> (usize, u64)| {
            members.iter().map(pick).fold((0, 0u64), |a, b| (a.0 + b.0, a.1.wrapping_add(b.1)))
        };
        if sum(|m| m.2) != sum(|m| m.3) {
            return Err(Error::Verification(format!("group {g} lost or gained records")));
        }
    }
    let t = report.results.iter().map(|m| m.0).fold(0.0, f64::max);
    let mean = report.results.iter().map(|m| m.1).sum::<u64>() / n as u64;
    Ok((t, mean))
}

pub fn bench_shuffle(spec: &BenchSpec) -> Result<BenchOutcome> {
    spec.validate()?;
    let mut out = BenchOutcome::default();
    for &n in &spec.n_ranks {
        for &groups in &spec.groups {
            for &corpus in &spec.payloads {
                let mut times = Vec::new();
                let mut shard = 0;
                let mut failed = None;
                for rep in 0..spec.repetitions {
                    match timed_shuffle(n, groups, corpus, spec, spec.seed.wrapping_add(rep as u64)) {
                        Ok((t, b)) => {
                            times.push(t);
                            shard = b;
                        }
                        Err(e) => {
                            failed = Some(e);
                            break;
                        }
                    }
                }
                if let Some(e) = failed {
                    out.fail(format!("shuffle on {n} ranks in {groups} groups"), &e);
                    continue;
                }
                let t = median(&mut times);
                info!("shuffle n={n} groups={groups} shard={shard}: {t:.6e} s");
                out.rows.push(BenchRow {
                    scenario: Scenario::Shuffle.name().into(),
                    algorithm: format!("alltoallv-g{groups}"),
                    n_ranks: n,
                    payload_bytes: shard,
                    median_time_s: t,
                    throughput_gbps: if t > 0.0 { shard as f64 / t / 1e9 } else { 0.0 },
                    backend: spec.backend.name().into(),
                });
            }
        }
    }
    Ok(out)
}

/// Training epochs per configuration; `median_time_s` is the median epoch
/// time and `throughput_GBps` the gradient bus bandwidth sustained over the
/// epoch. Scaling efficiency is reported in [`BenchOutcome::scaling`].
pub fn bench_train(spec: &BenchSpec) -> Result<BenchOutcome> {
    spec.validate()?;
    let mut out = BenchOutcome::default();
    let payload = spec.payloads.first().copied().unwrap_or(0);
    let elems = ((payload / 4) as usize).max(N_PARAMS + 2);
    let base = &spec.train;
    let ref_n = *spec.n_ranks.iter().min().expect("validated non-empty");
    let samples_per_epoch = base.per_worker_batch * base.workers_per_node * ref_n * 64;
    let corpus = synthetic_corpus(samples_per_epoch, spec.seed);
    for &algo in &spec.algorithms {
        let mut ref_time = None;
        for &n in &spec.n_ranks {
            let cfg = TrainConfig {
                n_nodes: n,
                algorithm: algo,
                colors: spec.colors,
                arity: spec.arity,
                segment_elems: spec.segment_elems,
                comm_padding_elems: elems - N_PARAMS - 2,
                epochs: spec.repetitions.max(base.epochs),
                seed: spec.seed,
                sampling: SamplingMode::PerRank,
                ..base.clone()
            };
            let report = match run_training(&cfg, &corpus, &spec.backend, &spec.transport) {
                Ok(r) => r,
                Err(e) => {
                    out.fail(format!("train {algo} on {n} ranks"), &e);
                    continue;
                }
            };
            let mut prev = 0.0;
            let mut times: Vec<f64> = report
                .epochs
                .iter()
                .map(|e| {
                    let t = e.elapsed_s - prev;
                    prev = e.elapsed_s;
                    t
                })
                .collect();
            let t = median(&mut times);
            let steps = report.steps.len() as f64 / report.epochs.len() as f64;
            let bytes = elems as u64 * 4;
            let bus = bus_bandwidth_gbps(bytes, n, t) * steps;
            info!("train {algo} n={n}: epoch {t:.6e} s");
            let r = *ref_time.get_or_insert((n, t));
            out.scaling.push((algo, n, r.1 * r.0 as f64 / (t * n as f64)));
            out.rows.push(BenchRow {
                scenario: Scenario::Train.name().into(),
                algorithm: algo.name().into(),
                n_ranks: n,
                payload_bytes: bytes,
                median_time_s: t,
                throughput_gbps: bus,
                backend: spec.backend.name().into(),
            });
        }
    }
    Ok(out)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::FormatError(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn emit_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    write_csv(rows, std::fs::File::create(path)?)
}

pub fn dump_topology(ts: &ColorTreeSet, path: &Path) -> Result<()> {
    std::fs::write(path, ts.to_json()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(alg: &str, t: f64) -> BenchRow {
        BenchRow {
            scenario: "allreduce".into(),
            algorithm: alg.into(),
            n_ranks: 4,
            payload_bytes: 1024,
            median_time_s: t,
            throughput_gbps: bus_bandwidth_gbps(1024, 4, t),
            backend: "sim".into(),
        }
    }

    #[test]
    fn csv_golden() {
        let mut empty = Vec::new();
        write_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), format!("{CSV_HEADER}\n"));

        let mut one = Vec::new();
        write_csv(&[row("ring", 0.5)], &mut one).unwrap();
        assert_eq!(
            String::from_utf8(one.clone()).unwrap(),
            format!("{CSV_HEADER}\nallreduce,ring,4,1024,0.5,3.072e-6,sim\n")
        );
        assert_eq!(read_csv(&one[..]).unwrap(), vec![row("ring", 0.5)]);
    }

    #[test]
    fn csv_parse_back() {
        let rows = vec![row("multicolor", 1.234567e-5), row("ring", 3.0), row("reduce_bcast", 7e-9)];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_csv(&buf[..]).unwrap(), rows);
        assert!(read_csv(&b"a,b\n1,2\n"[..]).is_err());
    }

    #[test]
    fn medians_and_bandwidth() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(bus_bandwidth_gbps(0, 4, 1.0), 0.0);
        assert_eq!(bus_bandwidth_gbps(1_000_000_000, 2, 1.0), 1.0);
    }

    fn small_spec() -> BenchSpec {
        BenchSpec {
            n_ranks: vec![4],
            payloads: vec![0, 4096],
            segment_elems: 256,
            ..Default::default()
        }
    }

    #[test]
    fn allreduce_rows_are_reproducible() {
        let spec = small_spec();
        let a = bench_allreduce(&spec).unwrap();
        assert!(a.failures.is_empty());
        assert_eq!(a.rows.len(), 6);
        for r in a.rows.iter().filter(|r| r.payload_bytes == 0) {
            assert!(r.median_time_s > 0.0 && r.median_time_s < 1e-4, "{r:?}");
            assert_eq!(r.throughput_gbps, 0.0);
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        write_csv(&a.rows, &mut x).unwrap();
        write_csv(&bench_allreduce(&spec).unwrap().rows, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn failed_configs_are_omitted() {
        let spec = BenchSpec {
            n_ranks: vec![5],
            colors: 4,
            arity: 2,
            payloads: vec![4096],
            ..Default::default()
        };
        let out = bench_allreduce(&spec).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.rows.len(), 2);
        assert!(bench_allreduce(&BenchSpec { repetitions: 2, ..small_spec() }).is_err());
    }

    #[test]
    fn shard_bytes_halve_when_ranks_double() {
        let spec = BenchSpec::default();
        let (_, a) = timed_shuffle(8, 2, 1 << 20, &spec, 1).unwrap();
        let (_, b) = timed_shuffle(16, 2, 1 << 20, &spec, 1).unwrap();
        assert_eq!(a, 2 * b);
        assert!(timed_shuffle(6, 4, 1 << 16, &spec, 1).is_err());
    }

    #[test]
    fn one_rank_shuffle_has_no_network_time() {
        let (t, b) = timed_shuffle(1, 1, 1 << 16, &BenchSpec::default(), 3).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(b, 1 << 16);
    }

    #[test]
    fn single_rank_training_times_match_across_algorithms() {
        let spec = BenchSpec {
            n_ranks: vec![1],
            payloads: vec![4096],
            ..Default::default()
        };
        let out = bench_train(&spec).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert!(out.rows.iter().all(|r| r.median_time_s == out.rows[0].median_time_s));
    }
}
